//! Corpus-level objective evaluation: resynthesize each utterance from its own
//! reference and score f0 RMSE, break F1 and WER.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{synthesize_with_control, ControlOptions};
use crate::corpus::{Lexicon, Utterance};
use crate::error::{Error, Result};
use crate::metrics::{edit_distance, normalize_words, rmse_f0, BreakCounts, BreakScores, TemplateRecognizer};
use crate::model::ProsodyModel;
use crate::phrasing::detect_breaks_in_mel;

/// Env var that forces single-threaded evaluation.
pub const DETERMINISTIC_ENV: &str = "PFM_DETERMINISTIC";

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub n_steps: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { n_steps: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEval {
    pub id: String,
    /// `None` when no aligned frame pair is voiced in both contours.
    pub rmse_f0: Option<f64>,
    pub gt_breaks: Vec<usize>,
    pub detected_breaks: Vec<usize>,
    pub break_counts: BreakCounts,
    pub hypothesis: Vec<String>,
    pub word_errors: usize,
    pub wer: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over utterances where the metric is defined.
    pub rmse_f0: Option<f64>,
    /// Micro-averaged over all utterances.
    pub break_f1: BreakScores,
    /// Total word errors over total reference words.
    pub wer: f64,
    pub per_utterance: Vec<UtteranceEval>,
}

impl EvalReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Scores one parallel resynthesis.
pub fn evaluate_utterance(
    model: &ProsodyModel,
    lexicon: &Lexicon,
    utt: &Utterance,
    opts: EvalOptions,
) -> Result<UtteranceEval> {
    let out = synthesize_with_control(
        model,
        lexicon,
        &utt.text(),
        utt,
        &[],
        ControlOptions {
            n_steps: opts.n_steps,
            seed: opts.seed,
        },
    )?;
    let syn = &out.synthesis;
    let rmse = match rmse_f0(&utt.pitch, &syn.mel.pitch_proxy()) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(m)) => {
            log::warn!("{}: f0 RMSE undefined: {m}", utt.id);
            None
        }
        Err(e) => return Err(e),
    };

    let fwa = syn.frame_word_alignment();
    let detected = detect_breaks_in_mel(&syn.mel, &fwa, utt.n_words(), model.config.min_gap_frames);
    let gt = utt.breaks.indices().to_vec();
    let counts = BreakCounts::from_sets(&gt, detected.indices());

    let spans: Vec<(usize, usize)> = (0..utt.n_words())
        .map(|w| syn.word_frames(w).unwrap_or((0, 0)))
        .collect();
    let hypothesis = TemplateRecognizer { lexicon }.recognize(&syn.mel, &spans, utt.speaker_id);
    let reference = normalize_words(&utt.words);
    let errors = edit_distance(&reference, &normalize_words(&hypothesis));
    Ok(UtteranceEval {
        id: utt.id.clone(),
        rmse_f0: rmse,
        gt_breaks: gt,
        detected_breaks: detected.indices().to_vec(),
        break_counts: counts,
        hypothesis,
        word_errors: errors,
        wer: errors as f64 / reference.len() as f64,
        frames: syn.mel.frames(),
    })
}

/// Scores every utterance; parallel across utterances unless deterministic
/// mode is set (results are identical either way).
pub fn evaluate(model: &ProsodyModel, lexicon: &Lexicon, utts: &[Utterance], opts: EvalOptions) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let per: Vec<UtteranceEval> = if deterministic_mode() {
        utts.iter()
            .map(|u| evaluate_utterance(model, lexicon, u, opts))
            .collect::<Result<_>>()?
    } else {
        utts.par_iter()
            .map(|u| evaluate_utterance(model, lexicon, u, opts))
            .collect::<Result<_>>()?
    };
    let defined: Vec<f64> = per.iter().filter_map(|p| p.rmse_f0).collect();
    let rmse = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let mut counts = BreakCounts::default();
    for p in &per {
        counts.tp += p.break_counts.tp;
        counts.fp += p.break_counts.fp;
        counts.fn_ += p.break_counts.fn_;
    }
    let errors: usize = per.iter().map(|p| p.word_errors).sum();
    let words: usize = utts.iter().map(|u| u.n_words()).sum();
    Ok(EvalReport {
        rmse_f0: rmse,
        break_f1: counts.scores(),
        wer: errors as f64 / words as f64,
        per_utterance: per,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_utterances, N_MELS};
    use crate::model::ModelConfig;

    #[test]
    fn report_has_the_three_metrics_and_is_reproducible() {
        let c = generate_utterances(2, 6, 3).unwrap();
        let m = ProsodyModel::new(
            ModelConfig::tiny(c.lexicon.n_phones(), 3, N_MELS),
            &c.lexicon.words(),
            0,
        )
        .unwrap();
        let opts = EvalOptions { n_steps: 2, seed: 0 };
        let a = evaluate(&m, &c.lexicon, &c.utterances, opts).unwrap();
        assert_eq!(a.per_utterance.len(), 2);
        assert!((0.0..=1.0).contains(&a.break_f1.f1));
        assert!(a.wer >= 0.0);
        let json: serde_json::Value = serde_json::to_value(&a).unwrap();
        for k in ["rmse_f0", "break_f1", "wer", "per_utterance"] {
            assert!(json.get(k).is_some(), "{k}");
        }
        let b = evaluate(&m, &c.lexicon, &c.utterances, opts).unwrap();
        assert_eq!(a, b);
    }
}
