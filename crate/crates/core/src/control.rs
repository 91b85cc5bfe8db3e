//! Prosody control: intonation slope edits on last-word pitch segments and
//! break insertion/removal, applied before synthesis.

use serde::{Deserialize, Serialize};

use crate::acoustic::SpeakerInput;
use crate::corpus::{strip_punctuation, tokenize, BreakAnnotation, Lexicon, Utterance, PITCH_BAND};
use crate::error::{Error, Result};
use crate::model::{ProsodyModel, Synthesis, SynthesisRequest};
use crate::phrasing::{detect_breaks_silence, predict_breaks_rule};
use crate::pitch::{process_contour, slice_last_word_segments, PitchShapeSegment};

/// Replaces a segment with the line of slope `k` (Hz per frame) through its mean.
pub fn set_segment_slope(segment: &PitchShapeSegment, k: f64) -> Result<PitchShapeSegment> {
    if segment.is_empty() {
        return Err(Error::EmptySegment);
    }
    let mean = segment.mean();
    let mid = (segment.len() - 1) as f64 / 2.0;
    let values = (0..segment.len()).map(|i| mean + k * (i as f64 - mid)).collect();
    Ok(PitchShapeSegment {
        values,
        ..segment.clone()
    })
}

/// Adds a break after `word`; adding an existing break is a no-op with a warning.
pub fn add_break(breaks: &BreakAnnotation, word: usize, n_words: usize) -> Result<BreakAnnotation> {
    if word >= n_words {
        return Err(Error::BreakOutOfRange {
            index: word,
            words: n_words,
        });
    }
    let mut out = breaks.clone();
    if !out.insert_index(word) {
        log::warn!("break after word {word} already present; unchanged");
        return Ok(breaks.clone());
    }
    Ok(out)
}

/// Removes the break after `word`, which must be present.
pub fn remove_break(breaks: &BreakAnnotation, word: usize) -> Result<BreakAnnotation> {
    let mut out = breaks.clone();
    if !out.remove_index(word) {
        return Err(Error::BreakNotPresent(word));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Edit {
    /// Set the terminal intonation of phrase-final `word` to slope `k`.
    Slope {
        word: usize,
        k: f64,
    },
    AddBreak(usize),
    RemoveBreak(usize),
}

/// A controlled synthesis with the conditioning it was produced from.
#[derive(Debug, Clone)]
pub struct ControlledSynthesis {
    pub synthesis: Synthesis,
    pub words: Vec<String>,
    pub breaks: BreakAnnotation,
    /// Hz-scale reference segments after edits.
    pub segments: Vec<PitchShapeSegment>,
    pub parallel: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ControlOptions {
    pub n_steps: usize,
    pub seed: u64,
}

impl Default for ControlOptions {
    fn default() -> Self {
        Self { n_steps: 10, seed: 0 }
    }
}

fn same_text(a: &[String], b: &[String]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| strip_punctuation(x) == strip_punctuation(y))
}

/// Synthesizes `target_text` with intonation taken from `reference` after
/// applying `edits`.
///
/// With parallel text, breaks are detected on the reference and edited, and
/// segments are sliced at the edited breaks. Otherwise breaks are predicted
/// from the text and edited, and segments come from the reference's own breaks.
pub fn synthesize_with_control(
    model: &ProsodyModel,
    lexicon: &Lexicon,
    target_text: &str,
    reference: &Utterance,
    edits: &[Edit],
    opts: ControlOptions,
) -> Result<ControlledSynthesis> {
    if model.trained_steps == 0 {
        log::warn!("synthesizing with an untrained model");
    }
    let words = tokenize(target_text);
    if words.is_empty() {
        return Err(Error::InvalidArgument("empty target text".into()));
    }
    let (phones, spans) = lexicon.phonemize(&words)?;
    let parallel = same_text(&words, &reference.words);
    let ref_breaks = detect_breaks_silence(reference, model.config.min_gap_frames).locations();
    let mut breaks = if parallel {
        ref_breaks.clone()
    } else {
        predict_breaks_rule(&words)?
    };
    for e in edits {
        breaks = match *e {
            Edit::AddBreak(w) => add_break(&breaks, w, words.len())?,
            Edit::RemoveBreak(w) => remove_break(&breaks, w)?,
            Edit::Slope { .. } => breaks,
        };
    }

    let contour = process_contour(&reference.pitch, model.config.smooth_window)?;
    let seg_breaks = if parallel { &breaks } else { &ref_breaks };
    let mut segments = slice_last_word_segments(&contour, &reference.frame_word_alignment, seg_breaks)?;
    for e in edits {
        if let Edit::Slope { word, k } = *e {
            let seg = segments
                .iter_mut()
                .find(|s| s.source_word == word)
                .ok_or_else(|| Error::InvalidArgument(format!("word {word} is not phrase-final in the reference")))?;
            *seg = set_segment_slope(seg, k)?;
        }
    }

    let speaker = SpeakerInput::Id(reference.speaker_id);
    let synthesis = model.synthesize(&SynthesisRequest {
        words: &words,
        phones: (&phones, &spans),
        breaks: &breaks,
        speaker: &speaker,
        segments: &segments,
        n_steps: opts.n_steps,
        seed: opts.seed,
    })?;
    Ok(ControlledSynthesis {
        synthesis,
        words,
        breaks,
        segments,
        parallel,
    })
}

/// Least-squares slope of the pitch band over a word's synthesized frames,
/// in band units per frame.
pub fn pitch_band_trend(s: &Synthesis, word: usize) -> Result<f64> {
    let (start, end) = s.word_frames(word).ok_or(Error::DegenerateSpan { word })?;
    let y: Vec<f64> = (start..end).map(|j| s.mel.data[[j, PITCH_BAND]] as f64).collect();
    let n = y.len() as f64;
    if y.len() < 2 {
        return Err(Error::DegenerateSpan { word });
    }
    let xm = (n - 1.0) / 2.0;
    let ym = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (v - ym);
        sxx += dx * dx;
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_utterances;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn seg(values: Vec<f64>) -> PitchShapeSegment {
        let n = values.len();
        PitchShapeSegment {
            values,
            source_word: 0,
            span: (0, n),
        }
    }

    #[test]
    fn slope_examples() {
        assert_eq!(
            set_segment_slope(&seg(vec![100.0, 120.0, 140.0]), 0.0).unwrap().values,
            vec![120.0; 3]
        );
        assert_eq!(
            set_segment_slope(&seg(vec![110.0, 120.0, 130.0]), 2.0).unwrap().values,
            vec![118.0, 120.0, 122.0]
        );
        assert!(matches!(set_segment_slope(&seg(vec![]), 1.0), Err(Error::EmptySegment)));
    }

    proptest! {
        #[test]
        fn slope_preserves_length_and_mean(v in prop::collection::vec(50.0f64..300.0, 1..30), k in -5.0f64..5.0) {
            let s = seg(v);
            let out = set_segment_slope(&s, k).unwrap();
            prop_assert_eq!(out.len(), s.len());
            prop_assert!((out.mean() - s.mean()).abs() < 1e-9);
        }

        #[test]
        fn slope_is_monotone_in_k(v in prop::collection::vec(50.0f64..300.0, 2..30), k1 in -5.0f64..5.0, dk in 0.01f64..5.0) {
            let s = seg(v);
            let span = |k: f64| { let o = set_segment_slope(&s, k).unwrap(); o.values[o.len() - 1] - o.values[0] };
            prop_assert!(span(k1 + dk) > span(k1));
        }
    }

    #[test]
    fn break_edit_examples() {
        let b = BreakAnnotation::new(vec![1], 5).unwrap();
        assert_eq!(add_break(&b, 3, 5).unwrap().indices(), &[1, 3]);
        let b13 = BreakAnnotation::new(vec![1, 3], 5).unwrap();
        assert_eq!(remove_break(&b13, 1).unwrap().indices(), &[3]);
        assert_eq!(add_break(&b13, 3, 5).unwrap(), b13);
        assert!(matches!(remove_break(&b, 2), Err(Error::BreakNotPresent(2))));
        assert!(add_break(&b, 9, 5).is_err());
    }

    #[test]
    fn break_edits_move_token_and_frame_counts() {
        let c = generate_utterances(2, 6, 4).unwrap();
        let m = ProsodyModel::new(
            ModelConfig::tiny(c.lexicon.n_phones(), 3, crate::corpus::N_MELS),
            &c.lexicon.words(),
            0,
        )
        .unwrap();
        let u = &c.utterances[0];
        let text = u.text();
        let opts = ControlOptions { n_steps: 2, seed: 1 };
        let base = synthesize_with_control(&m, &c.lexicon, &text, u, &[], opts).unwrap();
        assert!(base.parallel);
        let free = (0..u.n_words()).find(|w| !base.breaks.contains(*w)).unwrap();
        let added = synthesize_with_control(&m, &c.lexicon, &text, u, &[Edit::AddBreak(free)], opts).unwrap();
        assert_eq!(added.synthesis.extended.len(), base.synthesis.extended.len() + 1);
        let brk_pos = added
            .synthesis
            .extended
            .origin
            .iter()
            .position(|o| o.is_break() && o.word() == free)
            .unwrap();
        let dur_brk = added.synthesis.durations[brk_pos];
        assert!(dur_brk >= 1);
        assert_eq!(
            added.synthesis.mel.frames(),
            added.synthesis.durations.iter().sum::<usize>()
        );

        let first = base.breaks.indices()[0];
        let removed = synthesize_with_control(&m, &c.lexicon, &text, u, &[Edit::RemoveBreak(first)], opts).unwrap();
        assert_eq!(removed.synthesis.extended.len(), base.synthesis.extended.len() - 1);
        assert!(synthesize_with_control(&m, &c.lexicon, &text, u, &[Edit::RemoveBreak(free)], opts).is_err());
    }

    #[test]
    fn removing_every_break_leaves_no_brk_tokens() {
        let c = generate_utterances(2, 6, 4).unwrap();
        let m = ProsodyModel::new(
            ModelConfig::tiny(c.lexicon.n_phones(), 3, crate::corpus::N_MELS),
            &c.lexicon.words(),
            0,
        )
        .unwrap();
        let u = &c.utterances[0];
        let b = detect_breaks_silence(u, 5);
        let edits: Vec<Edit> = b.indices().iter().map(|&w| Edit::RemoveBreak(w)).collect();
        let out = synthesize_with_control(&m, &c.lexicon, &u.text(), u, &edits, ControlOptions::default()).unwrap();
        assert_eq!(out.synthesis.extended.n_breaks(), 0);
        assert!(out.segments.is_empty());
    }

    #[test]
    fn controlled_synthesis_is_deterministic() {
        let c = generate_utterances(2, 6, 4).unwrap();
        let m = ProsodyModel::new(
            ModelConfig::tiny(c.lexicon.n_phones(), 3, crate::corpus::N_MELS),
            &c.lexicon.words(),
            0,
        )
        .unwrap();
        let u = &c.utterances[0];
        let w = detect_breaks_silence(u, 5).indices()[0];
        let e = [Edit::Slope { word: w, k: 2.0 }];
        let a = synthesize_with_control(&m, &c.lexicon, &u.text(), u, &e, ControlOptions::default()).unwrap();
        let b = synthesize_with_control(&m, &c.lexicon, &u.text(), u, &e, ControlOptions::default()).unwrap();
        assert_eq!(a.synthesis.mel, b.synthesis.mel);
        assert!(pitch_band_trend(&a.synthesis, w).unwrap().is_finite());
    }
}
