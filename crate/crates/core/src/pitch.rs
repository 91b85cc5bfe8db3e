//! Pitch processing: gap interpolation, smoothing and offset perturbation of
//! f0 contours, and extraction of last-word pitch shape segments.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::BreakAnnotation;
use crate::corpus::FRAME_RATE;
use crate::error::{Error, Result};

pub const DEFAULT_SMOOTH_WINDOW: usize = 9;
pub const DEFAULT_F_MIN: f64 = 50.0;
pub const DEFAULT_F_MAX: f64 = 300.0;

/// Framewise f0 in Hz. `f0[i]` is meaningful only where `voiced[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchContour {
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
    pub frame_rate: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct FrameRecord {
    f0: f64,
    voiced: bool,
}

impl PitchContour {
    pub fn new(f0: Vec<f64>, voiced: Vec<bool>, frame_rate: f64) -> Result<Self> {
        if f0.len() != voiced.len() {
            return Err(Error::LengthMismatch(format!(
                "f0 has {} frames, voiced flags {}",
                f0.len(),
                voiced.len()
            )));
        }
        if let Some(i) = f0
            .iter()
            .zip(&voiced)
            .position(|(v, &vo)| vo && !(v.is_finite() && *v > 0.0))
        {
            return Err(Error::InvalidArgument(format!(
                "voiced frame {i} has invalid f0 {}",
                f0[i]
            )));
        }
        Ok(Self { f0, voiced, frame_rate })
    }

    /// Every frame voiced.
    pub fn voiced(f0: Vec<f64>) -> Result<Self> {
        let voiced = vec![true; f0.len()];
        Self::new(f0, voiced, FRAME_RATE)
    }

    /// Builds a contour from optional values, `None` meaning unvoiced.
    pub fn from_options(values: &[Option<f64>]) -> Result<Self> {
        let f0 = values.iter().map(|v| v.unwrap_or(0.0)).collect();
        let voiced = values.iter().map(Option::is_some).collect();
        Self::new(f0, voiced, FRAME_RATE)
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn is_fully_voiced(&self) -> bool {
        self.voiced.iter().all(|&v| v)
    }

    pub fn to_json(&self) -> String {
        let recs: Vec<FrameRecord> = self
            .f0
            .iter()
            .zip(&self.voiced)
            .map(|(&f0, &voiced)| FrameRecord {
                f0: if voiced { f0 } else { 0.0 },
                voiced,
            })
            .collect();
        serde_json::to_string(&recs).expect("serialisable")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let recs: Vec<FrameRecord> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::new(
            recs.iter().map(|r| r.f0).collect(),
            recs.iter().map(|r| r.voiced).collect(),
            FRAME_RATE,
        )
    }
}

/// Fills unvoiced gaps by linear interpolation between the nearest voiced
/// neighbours; leading and trailing gaps take the nearest voiced value.
pub fn interpolate(contour: &PitchContour) -> Result<PitchContour> {
    let voiced: Vec<usize> = (0..contour.len()).filter(|&i| contour.voiced[i]).collect();
    let (&first, &last) = match (voiced.first(), voiced.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::EmptyContour),
    };
    let mut f0 = contour.f0.clone();
    for v in f0.iter_mut().take(first) {
        *v = contour.f0[first];
    }
    for v in f0.iter_mut().skip(last + 1) {
        *v = contour.f0[last];
    }
    for pair in voiced.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (fa, fb) = (contour.f0[a], contour.f0[b]);
        for (i, v) in f0.iter_mut().enumerate().take(b).skip(a + 1) {
            let w = (i - a) as f64 / (b - a) as f64;
            *v = fa + w * (fb - fa);
        }
    }
    Ok(PitchContour {
        f0,
        voiced: vec![true; contour.len()],
        frame_rate: contour.frame_rate,
    })
}

/// Centred moving average with edge replication.
pub fn smooth(contour: &PitchContour, window: usize) -> Result<PitchContour> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "smoothing window must be odd and positive, got {window}"
        )));
    }
    if !contour.is_fully_voiced() {
        return Err(Error::InvalidArgument(
            "smooth expects a fully voiced contour; interpolate first".into(),
        ));
    }
    Ok(PitchContour {
        f0: moving_average(&contour.f0, window),
        voiced: contour.voiced.clone(),
        frame_rate: contour.frame_rate,
    })
}

fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len() as isize;
    let half = (window / 2) as isize;
    (0..n)
        .map(|i| {
            let sum: f64 = (i - half..=i + half).map(|j| x[j.clamp(0, n - 1) as usize]).sum();
            sum / window as f64
        })
        .collect()
}

/// `interpolate` followed by `smooth`.
pub fn process_contour(raw: &PitchContour, window: usize) -> Result<PitchContour> {
    smooth(&interpolate(raw)?, window)
}

/// A contiguous last-word slice of a processed contour.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchShapeSegment {
    pub values: Vec<f64>,
    pub source_word: usize,
    /// Frame range `start..end` in the source contour.
    pub span: (usize, usize),
}

impl PitchShapeSegment {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    /// First differences.
    pub fn diffs(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Subtracts a fixed offset from every value.
pub fn shift_segment(segment: &PitchShapeSegment, offset: f64) -> Result<PitchShapeSegment> {
    if segment.is_empty() {
        return Err(Error::EmptySegment);
    }
    Ok(PitchShapeSegment {
        values: segment.values.iter().map(|v| v - offset).collect(),
        ..segment.clone()
    })
}

/// Draws one offset `o ~ U[f_min, f_max]` and subtracts it from every value.
pub fn perturb(segment: &PitchShapeSegment, rng: &mut impl Rng, f_min: f64, f_max: f64) -> Result<PitchShapeSegment> {
    if segment.is_empty() {
        return Err(Error::EmptySegment);
    }
    if !(f_min <= f_max) {
        return Err(Error::InvalidArgument(format!("f_min {f_min} > f_max {f_max}")));
    }
    let offset = f_min + (f_max - f_min) * rng.random::<f64>();
    shift_segment(segment, offset)
}

/// Frame range `start..end` of `word`, from a per-frame word index (−1 = silence).
pub fn word_frame_span(frame_word_alignment: &[i64], word: usize) -> Option<(usize, usize)> {
    let w = word as i64;
    let start = frame_word_alignment.iter().position(|&x| x == w)?;
    let end = frame_word_alignment.iter().rposition(|&x| x == w)? + 1;
    Some((start, end))
}

/// Slices one segment per phrase-final word, in word order, without perturbation.
pub fn slice_last_word_segments(
    contour: &PitchContour,
    frame_word_alignment: &[i64],
    breaks: &BreakAnnotation,
) -> Result<Vec<PitchShapeSegment>> {
    if frame_word_alignment.len() != contour.len() {
        return Err(Error::LengthMismatch(format!(
            "alignment has {} frames, contour {}",
            frame_word_alignment.len(),
            contour.len()
        )));
    }
    breaks
        .indices()
        .iter()
        .map(|&w| {
            let (start, end) = word_frame_span(frame_word_alignment, w).ok_or(Error::DegenerateSpan { word: w })?;
            Ok(PitchShapeSegment {
                values: contour.f0[start..end].to_vec(),
                source_word: w,
                span: (start, end),
            })
        })
        .collect()
}

/// Slices the last-word segments of a processed contour and perturbs each
/// with its own random offset.
pub fn extract_last_word_segments(
    contour: &PitchContour,
    frame_word_alignment: &[i64],
    breaks: &BreakAnnotation,
    rng: &mut impl Rng,
    f_min: f64,
    f_max: f64,
) -> Result<Vec<PitchShapeSegment>> {
    slice_last_word_segments(contour, frame_word_alignment, breaks)?
        .iter()
        .map(|s| perturb(s, rng, f_min, f_max))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seg(values: Vec<f64>) -> PitchShapeSegment {
        let n = values.len();
        PitchShapeSegment {
            values,
            source_word: 0,
            span: (0, n),
        }
    }

    #[test]
    fn interpolates_interior_gap_linearly() {
        let c = PitchContour::from_options(&[Some(110.0), None, None, Some(140.0)]).unwrap();
        assert_eq!(interpolate(&c).unwrap().f0, vec![110.0, 120.0, 130.0, 140.0]);
    }

    #[test]
    fn extends_edges() {
        let c = PitchContour::from_options(&[None, Some(100.0), None]).unwrap();
        let out = interpolate(&c).unwrap();
        assert_eq!(out.f0, vec![100.0, 100.0, 100.0]);
        assert!(out.is_fully_voiced());
    }

    #[test]
    fn all_unvoiced_is_an_error() {
        let c = PitchContour::from_options(&[None, None]).unwrap();
        assert!(matches!(interpolate(&c), Err(Error::EmptyContour)));
    }

    #[test]
    fn smoothing_constant_is_identity() {
        let c = PitchContour::voiced(vec![100.0; 7]).unwrap();
        assert_eq!(smooth(&c, 5).unwrap().f0, vec![100.0; 7]);
    }

    #[test]
    fn smoothing_matches_hand_convolution() {
        let c = PitchContour::voiced(vec![100.0, 100.0, 130.0, 100.0, 100.0]).unwrap();
        let out = smooth(&c, 3).unwrap().f0;
        let expected = [100.0, 110.0, 110.0, 110.0, 100.0];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn window_one_is_identity_and_even_windows_fail() {
        let c = PitchContour::voiced(vec![100.0, 123.0, 90.0]).unwrap();
        assert_eq!(smooth(&c, 1).unwrap().f0, c.f0);
        assert!(smooth(&c, 4).is_err());
        assert!(smooth(&c, 0).is_err());
    }

    #[test]
    fn shift_by_known_offset() {
        let out = shift_segment(&seg(vec![200.0, 210.0, 205.0]), 50.0).unwrap();
        assert_eq!(out.values, vec![150.0, 160.0, 155.0]);
    }

    #[test]
    fn zero_range_perturbation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = seg(vec![120.0, 125.0]);
        assert_eq!(perturb(&s, &mut rng, 0.0, 0.0).unwrap().values, s.values);
    }

    #[test]
    fn empty_segment_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            perturb(&seg(vec![]), &mut rng, 50.0, 300.0),
            Err(Error::EmptySegment)
        ));
    }

    #[test]
    fn segments_follow_break_order() {
        let contour = PitchContour::voiced((0..10).map(|i| 100.0 + i as f64).collect()).unwrap();
        let align = [0, 0, 1, 1, -1, 2, 2, 2, -1, -1];
        let breaks = BreakAnnotation::new(vec![1, 2], 3).unwrap();
        let segs = slice_last_word_segments(&contour, &align, &breaks).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].source_word, 1);
        assert_eq!(segs[0].values, vec![102.0, 103.0]);
        assert_eq!(segs[1].span, (5, 8));
    }

    #[test]
    fn break_without_frames_is_degenerate() {
        let contour = PitchContour::voiced(vec![100.0; 4]).unwrap();
        let align = [0, 0, 0, -1];
        let breaks = BreakAnnotation::new(vec![1], 2).unwrap();
        assert!(matches!(
            slice_last_word_segments(&contour, &align, &breaks),
            Err(Error::DegenerateSpan { word: 1 })
        ));
    }

    proptest! {
        #[test]
        fn perturb_preserves_differences(values in prop::collection::vec(50.0f64..400.0, 1..40), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = seg(values);
            let p = perturb(&s, &mut rng, DEFAULT_F_MIN, DEFAULT_F_MAX).unwrap();
            let offset = s.values[0] - p.values[0];
            prop_assert!((DEFAULT_F_MIN..=DEFAULT_F_MAX).contains(&offset) || (offset - DEFAULT_F_MAX).abs() < 1e-9);
            for (a, b) in s.diffs().iter().zip(p.diffs()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn interpolate_then_smooth_is_idempotent_on_constants(v in 60.0f64..400.0, n in 1usize..30, w in 0usize..6) {
            let c = PitchContour::voiced(vec![v; n]).unwrap();
            let once = process_contour(&c, 2 * w + 1).unwrap();
            let twice = process_contour(&once, 2 * w + 1).unwrap();
            for (a, b) in once.f0.iter().zip(&twice.f0) {
                prop_assert!((a - v).abs() < 1e-9 && (a - b).abs() < 1e-9);
            }
        }
    }
}
