//! Conditional flow matching: the probability path, the regression loss, the
//! prior likelihood and Euler sampling.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::mas::Alignment;
use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId};

pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;

pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")))
    }
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() == b.dim() {
        Ok(())
    } else {
        Err(Error::LengthMismatch(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())))
    }
}

/// Mean of the conditional path, `(1 − (1 − σ)t)·x0 + t·x1`.
pub fn path_mean(x0: &Array2<f64>, x1: &Array2<f64>, t: f64, sigma_min: f64) -> Result<Array2<f64>> {
    check_t(t)?;
    same_shape(x0, x1, "x0/x1")?;
    Ok(x0 * (1.0 - (1.0 - sigma_min) * t) + x1 * t)
}

/// `x_t = (1 − (1 − σ)t)·x0 + t·x1 + σ·ε` with the given noise.
pub fn sample_xt_with_noise(
    x0: &Array2<f64>,
    x1: &Array2<f64>,
    t: f64,
    sigma_min: f64,
    eps: &Array2<f64>,
) -> Result<Array2<f64>> {
    same_shape(x0, eps, "x0/noise")?;
    Ok(path_mean(x0, x1, t, sigma_min)? + eps * sigma_min)
}

/// [`sample_xt_with_noise`] with `ε ~ N(0, I)` drawn from `rng`.
pub fn sample_xt(
    x0: &Array2<f64>,
    x1: &Array2<f64>,
    t: f64,
    sigma_min: f64,
    rng: &mut impl Rng,
) -> Result<Array2<f64>> {
    check_t(t)?;
    let eps = standard_normal(rng, x0.nrows(), x0.ncols());
    sample_xt_with_noise(x0, x1, t, sigma_min, &eps)
}

/// Regression target `x1 − (1 − σ)·x0`.
pub fn cfm_target(x0: &Array2<f64>, x1: &Array2<f64>, sigma_min: f64) -> Array2<f64> {
    x1 - &(x0 * (1.0 - sigma_min))
}

/// Mean squared error between `u_pred` and the target field.
pub fn cfm_loss(u_pred: &Array2<f64>, x0: &Array2<f64>, x1: &Array2<f64>, sigma_min: f64) -> Result<f64> {
    same_shape(u_pred, x0, "u_pred/x0")?;
    same_shape(x0, x1, "x0/x1")?;
    let d = u_pred - &cfm_target(x0, x1, sigma_min);
    Ok(d.mapv(|v| v * v).mean().unwrap_or(0.0))
}

pub fn cfm_loss_graph(g: &mut Graph, u_pred: NodeId, target: &Array2<f64>) -> Result<NodeId> {
    if g.shape(u_pred) != target.dim() {
        return Err(Error::LengthMismatch(format!(
            "u_pred {:?} vs target {:?}",
            g.shape(u_pred),
            target.dim()
        )));
    }
    let t = g.constant(target.clone());
    let d = g.sub(u_pred, t);
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Gaussian negative log-likelihood of frames under aligned priors,
/// `Σ_j (n/2·log 2π + ½‖z_j − μ_{A(j)}‖²)`.
pub fn prior_loss(z: &Array2<f64>, mu: &Array2<f64>, a: &Alignment) -> Result<f64> {
    if a.frames() != z.nrows() || z.ncols() != mu.ncols() {
        return Err(Error::LengthMismatch(format!(
            "z {:?}, μ {:?}, alignment {}",
            z.dim(),
            mu.dim(),
            a.frames()
        )));
    }
    let n = z.ncols() as f64;
    let c = 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    Ok(a.0
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            c + 0.5
                * z.row(j)
                    .iter()
                    .zip(mu.row(i))
                    .map(|(x, m)| (x - m) * (x - m))
                    .sum::<f64>()
        })
        .sum())
}

/// Graph form of [`prior_loss`]; `mu_aligned` is already gathered per frame.
pub fn prior_loss_graph(g: &mut Graph, z: &Array2<f64>, mu_aligned: NodeId) -> Result<NodeId> {
    if g.shape(mu_aligned) != z.dim() {
        return Err(Error::LengthMismatch(format!(
            "z {:?} vs aligned μ {:?}",
            z.dim(),
            g.shape(mu_aligned)
        )));
    }
    let c = 0.5 * z.len() as f64 * (2.0 * std::f64::consts::PI).ln();
    let zc = g.constant(z.clone());
    let d = g.sub(zc, mu_aligned);
    let sq = g.square(d);
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    Ok(g.add_scalar(half, c))
}

/// A vector field `u(x_t, c, t)` over frame matrices.
pub trait VectorField {
    fn eval(&self, x: &Array2<f64>, cond: &Array2<f64>, t: f64) -> Array2<f64>;
}

/// `u ≡ v`, independent of its inputs.
#[derive(Debug, Clone)]
pub struct ConstantField(pub Array2<f64>);

impl VectorField for ConstantField {
    fn eval(&self, _x: &Array2<f64>, _cond: &Array2<f64>, _t: f64) -> Array2<f64> {
        self.0.clone()
    }
}

/// Euler integration from t = 0 to 1 in `n_steps` uniform steps.
pub fn decode_ode(
    field: &dyn VectorField,
    cond: &Array2<f64>,
    x0: &Array2<f64>,
    n_steps: usize,
) -> Result<Array2<f64>> {
    if n_steps < 1 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    same_shape(x0, cond, "x0/condition")?;
    let dt = 1.0 / n_steps as f64;
    let mut x = x0.clone();
    for k in 0..n_steps {
        let u = field.eval(&x, cond, k as f64 * dt);
        x.scaled_add(dt, &u);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn path_examples() {
        let x0 = array![[1.0]];
        let x1 = array![[3.0]];
        // (1 − 0.9·0.5)·1 + 0.5·3
        let v = sample_xt_with_noise(&x0, &x1, 0.5, 0.1, &array![[0.0]]).unwrap()[[0, 0]];
        assert!((v - 2.05).abs() < 1e-15);
        assert_eq!(path_mean(&x0, &x1, 0.0, 1e-4).unwrap(), x0);
        let m1 = path_mean(&x0, &x1, 1.0, 0.1).unwrap();
        assert!((m1[[0, 0]] - (0.1 * 1.0 + 3.0)).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_xt(&x0, &x1, 1.5, 0.1, &mut rng).is_err());
    }

    #[test]
    fn cfm_examples() {
        let x0 = array![[1.0]];
        let x1 = array![[3.0]];
        assert_eq!(cfm_loss(&array![[0.0]], &x0, &x1, 0.0).unwrap(), 4.0);
        let u = cfm_target(&x0, &x1, 1e-4);
        assert_eq!(cfm_loss(&u, &x0, &x1, 1e-4).unwrap(), 0.0);
    }

    #[test]
    fn prior_examples() {
        let a = Alignment(vec![0]);
        let v = prior_loss(&array![[2.0]], &array![[0.0]], &a).unwrap();
        assert!((v - (0.5 * (2.0 * std::f64::consts::PI).ln() + 2.0)).abs() < 1e-15);
        let mu = Array2::from_elem((2, 80), 0.3);
        let z = Array2::from_elem((5, 80), 0.3);
        let a = Alignment(vec![0, 0, 1, 1, 1]);
        let expect = 5.0 * 40.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((prior_loss(&z, &mu, &a).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn euler_constant_field_is_exact() {
        let v = array![[0.5, -1.0], [2.0, 0.25]];
        let x0 = array![[1.0, 2.0], [3.0, 4.0]];
        for n in [1, 3, 10] {
            let out = decode_ode(&ConstantField(v.clone()), &x0, &x0, n).unwrap();
            assert!((&out - &(&x0 + &v)).iter().all(|d| d.abs() < 1e-12));
        }
        assert!(decode_ode(&ConstantField(v), &x0, &x0, 0).is_err());
    }
}
