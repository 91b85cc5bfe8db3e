//! Objective metrics: DTW-aligned log-f0 RMSE, break precision/recall/F1 and WER.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{phone_template, strip_punctuation, Lexicon, MelSpectrogram, N_MELS, PITCH_BAND};
use crate::error::{Error, Result};
use crate::pitch::PitchContour;

/// Local DTW cost for a voiced/unvoiced mismatch.
pub const DTW_MISMATCH_COST: f64 = 1.0;

fn local_cost(a: f64, va: bool, b: f64, vb: bool) -> f64 {
    match (va, vb) {
        (true, true) => (a - b).powi(2),
        (false, false) => 0.0,
        _ => DTW_MISMATCH_COST,
    }
}

/// Log-f0 with the mean over voiced frames removed; unvoiced frames are 0.
fn normalized_log_f0(c: &PitchContour) -> Vec<f64> {
    let logs: Vec<f64> =
        c.f0.iter()
            .zip(&c.voiced)
            .filter(|(_, &v)| v)
            .map(|(f, _)| f.ln())
            .collect();
    let mean = if logs.is_empty() {
        0.0
    } else {
        logs.iter().sum::<f64>() / logs.len() as f64
    };
    c.f0.iter()
        .zip(&c.voiced)
        .map(|(f, &v)| if v { f.ln() - mean } else { 0.0 })
        .collect()
}

/// Symmetric DTW path between two contours as `(i, j)` index pairs.
///
/// Local cost is the squared difference of mean-normalised log-f0 on
/// voiced/voiced pairs, [`DTW_MISMATCH_COST`] on voiced/unvoiced pairs and 0
/// otherwise, so the alignment is invariant to a constant pitch ratio between
/// the contours. Steps are (1,1), (1,0), (0,1) with unit weight; on equal
/// accumulated cost the diagonal predecessor wins, then the one advancing `a`.
pub fn dtw_path(a: &PitchContour, b: &PitchContour) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let (la, lb) = (normalized_log_f0(a), normalized_log_f0(b));
    let mut d = vec![f64::INFINITY; n * m];
    let at = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        for j in 0..m {
            let c = local_cost(la[i], a.voiced[i], lb[j], b.voiced[j]);
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 {
                    d[at(i - 1, j - 1)]
                } else {
                    f64::INFINITY
                };
                let up = if i > 0 { d[at(i - 1, j)] } else { f64::INFINITY };
                let left = if j > 0 { d[at(i, j - 1)] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            d[at(i, j)] = c + prev;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 {
            d[at(i - 1, j - 1)]
        } else {
            f64::INFINITY
        };
        let up = if i > 0 { d[at(i - 1, j)] } else { f64::INFINITY };
        let left = if j > 0 { d[at(i, j - 1)] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    path
}

fn canonical_cmp(a: &PitchContour, b: &PitchContour) -> Ordering {
    let key =
        |c: &PitchContour| -> Vec<(bool, u64)> { c.f0.iter().zip(&c.voiced).map(|(f, &v)| (v, f.to_bits())).collect() };
    a.len().cmp(&b.len()).then_with(|| key(a).cmp(&key(b)))
}

/// Root-mean-square natural-log f0 error over the both-voiced pairs of the DTW path.
///
/// The two contours are put in a canonical order before alignment, so the
/// value is exactly symmetric in its arguments.
pub fn rmse_f0(gt: &PitchContour, syn: &PitchContour) -> Result<f64> {
    if gt.is_empty() || syn.is_empty() {
        return Err(Error::InvalidArgument("rmse_f0 needs nonempty contours".into()));
    }
    let (a, b) = if canonical_cmp(gt, syn) == Ordering::Greater {
        (syn, gt)
    } else {
        (gt, syn)
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, j) in dtw_path(a, b) {
        if a.voiced[i] && b.voiced[j] {
            sum += (a.f0[i] / b.f0[j]).ln().powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric(
            "no both-voiced frame pair on the DTW path".into(),
        ));
    }
    Ok((sum / count as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreakScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// True/false positive and false negative counts, accumulable across utterances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BreakCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl BreakCounts {
    pub fn from_sets(gt: &[usize], detected: &[usize]) -> Self {
        let mut c = Self::default();
        c.add(gt, detected);
        c
    }

    pub fn add(&mut self, gt: &[usize], detected: &[usize]) {
        let tp = detected.iter().filter(|d| gt.contains(d)).count();
        self.tp += tp;
        self.fp += detected.len() - tp;
        self.fn_ += gt.len() - tp;
    }

    /// P = 1 (R = 1) when both sets are empty; 0 when only the prediction
    /// (only the truth) is empty. F1 is 0 when P + R = 0.
    pub fn scores(&self) -> BreakScores {
        let pred = self.tp + self.fp;
        let truth = self.tp + self.fn_;
        let precision = if pred == 0 {
            if truth == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.tp as f64 / pred as f64
        };
        let recall = if truth == 0 {
            if pred == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.tp as f64 / truth as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        BreakScores { precision, recall, f1 }
    }
}

/// Exact word-index matching between two break sets.
pub fn break_f1(gt: &crate::corpus::BreakAnnotation, detected: &crate::corpus::BreakAnnotation) -> BreakScores {
    BreakCounts::from_sets(gt.indices(), detected.indices()).scores()
}

/// Levenshtein distance between token sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate: edit distance over the reference length.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("WER needs a nonempty reference".into()));
    }
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

/// Nearest-template word recogniser for synthesized toy mels.
///
/// Given the frame span of each word, every lexicon entry is rendered as its
/// phone templates stretched over the span and the closest one (mean squared
/// distance over the non-pitch bands) wins.
#[derive(Debug, Clone)]
pub struct TemplateRecognizer<'a> {
    pub lexicon: &'a Lexicon,
}

impl TemplateRecognizer<'_> {
    pub fn recognize_word(&self, mel: &MelSpectrogram, span: (usize, usize), speaker: usize) -> Option<String> {
        let (start, end) = span;
        if end <= start || end > mel.frames() {
            return None;
        }
        let len = end - start;
        let mut best: Option<(f64, &String)> = None;
        for (word, phones) in &self.lexicon.entries {
            let templates: Vec<[f64; N_MELS]> = phones.iter().map(|&p| phone_template(p, speaker)).collect();
            let mut dist = 0.0;
            for k in 0..len {
                let t = &templates[k * phones.len() / len];
                for b in (0..N_MELS).filter(|&b| b != PITCH_BAND) {
                    dist += (mel.data[[start + k, b]] as f64 - t[b]).powi(2);
                }
            }
            if best.is_none_or(|(d, _)| dist < d) {
                best = Some((dist, word));
            }
        }
        best.map(|(_, w)| w.clone())
    }

    pub fn recognize(&self, mel: &MelSpectrogram, spans: &[(usize, usize)], speaker: usize) -> Vec<String> {
        spans
            .iter()
            .map(|&s| self.recognize_word(mel, s, speaker).unwrap_or_default())
            .collect()
    }
}

/// Bare words for WER scoring.
pub fn normalize_words(words: &[String]) -> Vec<String> {
    words.iter().map(|w| strip_punctuation(w).to_lowercase()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::BreakAnnotation;
    use proptest::prelude::*;

    fn voiced(v: &[f64]) -> PitchContour {
        PitchContour::voiced(v.to_vec()).unwrap()
    }

    #[test]
    fn rmse_identity_and_doubling() {
        let gt = voiced(&[100.0, 120.0, 150.0, 130.0]);
        assert_eq!(rmse_f0(&gt, &gt).unwrap(), 0.0);
        let syn = voiced(&[200.0, 240.0, 300.0, 260.0]);
        assert!((rmse_f0(&gt, &syn).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dtw_absorbs_tempo() {
        let gt = voiced(&[100.0, 200.0]);
        let syn = voiced(&[100.0, 100.0, 200.0]);
        assert_eq!(dtw_path(&gt, &syn), vec![(0, 0), (0, 1), (1, 2)]);
        assert_eq!(rmse_f0(&gt, &syn).unwrap(), 0.0);
    }

    #[test]
    fn no_voiced_pair_is_undefined() {
        let a = PitchContour::from_options(&[None, None]).unwrap();
        let b = voiced(&[100.0]);
        assert!(matches!(rmse_f0(&a, &b), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn break_f1_examples() {
        let b = |v: Vec<usize>| BreakAnnotation::new(v, 8).unwrap();
        assert_eq!(break_f1(&b(vec![2, 5]), &b(vec![2, 5])).f1, 1.0);
        let s = break_f1(&b(vec![2, 5]), &b(vec![2]));
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(break_f1(&b(vec![]), &b(vec![])).f1, 1.0);
        let s = break_f1(&b(vec![]), &b(vec![1]));
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        let s = break_f1(&b(vec![1]), &b(vec![]));
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn wer_examples() {
        let r = ["a", "b", "c"];
        assert_eq!(wer(&r, &r).unwrap(), 0.0);
        assert!((wer(&r, &["a", "x", "c"]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(wer::<&str>(&[], &["a"]).is_err());
    }

    fn contour() -> impl Strategy<Value = PitchContour> {
        prop::collection::vec(prop::option::weighted(0.8, 60.0f64..400.0), 1..12)
            .prop_map(|v| PitchContour::from_options(&v).unwrap())
    }

    proptest! {
        #[test]
        fn rmse_is_symmetric(a in contour(), b in contour()) {
            let x = rmse_f0(&a, &b).ok();
            let y = rmse_f0(&b, &a).ok();
            prop_assert_eq!(x.map(f64::to_bits), y.map(f64::to_bits));
        }

        #[test]
        fn rmse_scale_law(v in prop::collection::vec(60.0f64..400.0, 1..12), c in 0.25f64..4.0) {
            let gt = voiced(&v);
            let syn = voiced(&v.iter().map(|x| x * c).collect::<Vec<_>>());
            prop_assert!((rmse_f0(&gt, &syn).unwrap() - c.ln().abs()).abs() < 1e-9);
        }

        #[test]
        fn wer_zero_iff_equal(a in prop::collection::vec(0u8..4, 1..7), b in prop::collection::vec(0u8..4, 0..7)) {
            let w = wer(&a.iter().map(|x| x.to_string()).collect::<Vec<_>>(), &b.iter().map(|x| x.to_string()).collect::<Vec<_>>()).unwrap();
            prop_assert!(w >= 0.0);
            prop_assert_eq!(w == 0.0, a == b);
        }

        #[test]
        fn f1_bounded_and_one_iff_equal(a in prop::collection::btree_set(0usize..8, 0..5), b in prop::collection::btree_set(0usize..8, 0..5)) {
            let a: Vec<_> = a.into_iter().collect();
            let b: Vec<_> = b.into_iter().collect();
            let s = BreakCounts::from_sets(&a, &b).scores();
            prop_assert!((0.0..=1.0).contains(&s.f1));
            prop_assert_eq!(s.f1 == 1.0, a == b);
        }
    }
}
