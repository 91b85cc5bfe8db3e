//! Monotonic alignment search between mel frames and token priors.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Per-frame token index: monotone non-decreasing, starting at token 0,
/// ending at the last token, every token covered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment(pub Vec<usize>);

impl Alignment {
    pub fn frames(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Expands per-token durations into a per-frame index.
    pub fn from_durations(durations: &[usize]) -> Result<Self> {
        if durations.contains(&0) {
            return Err(Error::InvalidArgument("every token needs at least one frame".into()));
        }
        Ok(Self(
            durations
                .iter()
                .enumerate()
                .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
                .collect(),
        ))
    }

    /// Checks monotonicity and surjectivity onto `0..n_tokens`.
    pub fn validate(&self, n_tokens: usize) -> Result<()> {
        let a = &self.0;
        let ok = !a.is_empty()
            && a[0] == 0
            && *a.last().expect("nonempty") + 1 == n_tokens
            && a.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "alignment is not monotone and surjective onto {n_tokens} tokens"
            )))
        }
    }
}

/// `d_i` = number of frames assigned to token `i`.
pub fn durations_from_alignment(a: &Alignment) -> Vec<usize> {
    let n = a.0.last().map_or(0, |&l| l + 1);
    let mut d = vec![0; n];
    for &i in &a.0 {
        d[i] += 1;
    }
    d
}

/// `log N(z; μ, I)` for every (token, frame) pair, `tokens × frames`.
pub fn log_likelihoods(z: &Array2<f64>, mu: &Array2<f64>) -> Array2<f64> {
    let n = z.ncols() as f64;
    let c = -0.5 * n * (2.0 * std::f64::consts::PI).ln();
    Array2::from_shape_fn((mu.nrows(), z.nrows()), |(i, j)| {
        let d2: f64 = z.row(j).iter().zip(mu.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
        c - 0.5 * d2
    })
}

/// `Σ_j log N(z_j; μ_{A(j)}, I)`.
pub fn alignment_log_likelihood(z: &Array2<f64>, mu: &Array2<f64>, a: &Alignment) -> f64 {
    let ll = log_likelihoods(z, mu);
    a.0.iter().enumerate().map(|(j, &i)| ll[[i, j]]).sum()
}

fn check_shapes(z: &Array2<f64>, mu: &Array2<f64>) -> Result<()> {
    if z.ncols() != mu.ncols() {
        return Err(Error::LengthMismatch(format!(
            "frames have {} bins, priors {}",
            z.ncols(),
            mu.ncols()
        )));
    }
    if mu.nrows() == 0 || z.nrows() < mu.nrows() {
        return Err(Error::InfeasibleAlignment {
            frames: z.nrows(),
            tokens: mu.nrows(),
        });
    }
    Ok(())
}

/// Most probable monotonic surjective alignment of frames `z` to priors `mu`
/// under identity covariance, with its log-likelihood.
///
/// While backtracking, a tie between staying on token `i` and moving to
/// `i − 1` moves, i.e. the token transition is placed as late as possible.
pub fn mas_align_scored(z: &Array2<f64>, mu: &Array2<f64>) -> Result<(Alignment, f64)> {
    check_shapes(z, mu)?;
    let (n, t) = (mu.nrows(), z.nrows());
    let ll = log_likelihoods(z, mu);
    let neg = f64::NEG_INFINITY;
    // q[i][j]: best score of frames 0..=j with frame j on token i.
    let mut q = Array2::from_elem((n, t), neg);
    q[[0, 0]] = ll[[0, 0]];
    for j in 1..t {
        for i in 0..n.min(j + 1) {
            let stay = q[[i, j - 1]];
            let advance = if i > 0 { q[[i - 1, j - 1]] } else { neg };
            q[[i, j]] = ll[[i, j]] + stay.max(advance);
        }
    }
    let score = q[[n - 1, t - 1]];
    let mut a = vec![0; t];
    let mut i = n - 1;
    for j in (0..t).rev() {
        a[j] = i;
        if j == 0 {
            break;
        }
        // Must move when the remaining frames exactly cover the remaining tokens.
        if i > 0 && (i == j || q[[i - 1, j - 1]] >= q[[i, j - 1]]) {
            i -= 1;
        }
    }
    Ok((Alignment(a), score))
}

pub fn mas_align(z: &Array2<f64>, mu: &Array2<f64>) -> Result<Alignment> {
    mas_align_scored(z, mu).map(|(a, _)| a)
}

/// Every monotonic surjective alignment of `frames` onto `tokens` (exponential; test oracle).
pub fn enumerate_alignments(tokens: usize, frames: usize) -> Vec<Alignment> {
    fn rec(tokens: usize, frames: usize, cur: &mut Vec<usize>, out: &mut Vec<Alignment>) {
        let j = cur.len();
        if j == frames {
            if cur.last() == Some(&(tokens - 1)) {
                out.push(Alignment(cur.clone()));
            }
            return;
        }
        let options: Vec<usize> = match cur.last() {
            None => vec![0],
            Some(&i) => {
                if i + 1 < tokens {
                    vec![i, i + 1]
                } else {
                    vec![i]
                }
            }
        };
        for i in options {
            // Leave enough frames for the remaining tokens.
            if tokens - i <= frames - j {
                cur.push(i);
                rec(tokens, frames, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    if tokens >= 1 && frames >= tokens {
        rec(tokens, frames, &mut Vec::new(), &mut out);
    }
    out
}

/// Exhaustive maximum of the alignment log-likelihood.
pub fn brute_force_best_score(z: &Array2<f64>, mu: &Array2<f64>) -> Result<f64> {
    check_shapes(z, mu)?;
    Ok(enumerate_alignments(mu.nrows(), z.nrows())
        .iter()
        .map(|a| alignment_log_likelihood(z, mu, a))
        .fold(f64::NEG_INFINITY, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn examples() {
        let z = array![[0.0], [0.0], [0.0]];
        assert_eq!(mas_align(&z, &array![[1.0]]).unwrap().0, vec![0, 0, 0]);
        let z = array![[0.0], [0.0], [10.0]];
        assert_eq!(mas_align(&z, &array![[0.0], [10.0]]).unwrap().0, vec![0, 0, 1]);
        assert!(matches!(
            mas_align(&array![[0.0]], &array![[0.0], [1.0]]),
            Err(Error::InfeasibleAlignment { frames: 1, tokens: 2 })
        ));
    }

    #[test]
    fn ties_take_the_later_transition() {
        // Identical priors: every alignment scores the same.
        let z = Array2::zeros((4, 1));
        let mu = Array2::zeros((2, 1));
        assert_eq!(mas_align(&z, &mu).unwrap().0, vec![0, 0, 0, 1]);
    }

    #[test]
    fn durations() {
        let a = Alignment(vec![0, 0, 1, 2, 2, 2]);
        assert_eq!(durations_from_alignment(&a), vec![2, 1, 3]);
        assert_eq!(durations_from_alignment(&Alignment(vec![0; 5])), vec![5]);
        assert_eq!(Alignment::from_durations(&[2, 1, 3]).unwrap(), a);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..=4);
            let t = rng.random_range(n..=8);
            let z = normal(&mut rng, t, 3, 1.0);
            let mu = normal(&mut rng, n, 3, 1.0);
            let (a, s) = mas_align_scored(&z, &mu).unwrap();
            let best = brute_force_best_score(&z, &mu).unwrap();
            assert!((s - best).abs() < 1e-9);
            assert!((alignment_log_likelihood(&z, &mu, &a) - best).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn alignment_laws(n in 1usize..6, extra in 0usize..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = n + extra;
            let z = normal(&mut rng, t, 2, 2.0);
            let mu = normal(&mut rng, n, 2, 2.0);
            let a = mas_align(&z, &mu).unwrap();
            prop_assert!(a.validate(n).is_ok());
            let d = durations_from_alignment(&a);
            prop_assert_eq!(d.len(), n);
            prop_assert_eq!(d.iter().sum::<usize>(), t);
            prop_assert!(d.iter().all(|&x| x >= 1));
        }
    }
}
