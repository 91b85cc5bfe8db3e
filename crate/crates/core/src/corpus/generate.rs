//! Deterministic pseudo-speech corpus.
//!
//! Each word has a fixed 2–4 phone pronunciation, each phone a fixed frame
//! count and a two-bump spectral template. Band [`PITCH_BAND`] carries the
//! normalised f0 of every speech frame. Phrase-final words follow a rising,
//! falling or level pitch plan and are followed by 5–20 frames of silence.
//! Sentences are rendered twice with different terminal plans, so text alone
//! never determines the terminal pitch movement.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::io::{save_corpus, CorpusManifest};
use super::{
    pitch_to_band, BreakAnnotation, Lexicon, MelSpectrogram, PitchPlan, PitchPlanKind, Utterance, N_MELS, PITCH_BAND,
    SILENCE_LEVEL,
};
use crate::error::{Error, Result};
use crate::pitch::PitchContour;

pub const PHONE_SYMBOLS: [&str; 20] = [
    "p", "t", "k", "b", "d", "g", "m", "n", "s", "l", "r", "f", "v", "z", "a", "e", "i", "o", "u", "y",
];
const N_CONSONANTS: usize = 14;
pub const N_SPEAKERS: usize = 3;
const SPEAKER_BASE_F0: [f64; N_SPEAKERS] = [110.0, 150.0, 190.0];
const MIN_SILENCE: usize = 5;
const MAX_SILENCE: usize = 20;
const DROPOUT_PROB: f64 = 0.08;
const TEXTURE_STD: f64 = 0.05;

/// Frames rendered for one phone.
pub fn phone_frames(phone: usize) -> usize {
    2 + phone % 3
}

/// Spectral template of a phone for a speaker; entry [`PITCH_BAND`] is zero.
pub fn phone_template(phone: usize, speaker: usize) -> [f64; N_MELS] {
    let c1 = 6.0 + ((phone * 7) % 30) as f64;
    let c2 = 36.0 + ((phone * 11) % 40) as f64;
    let mut t = [0.0; N_MELS];
    for (b, v) in t.iter_mut().enumerate().skip(1) {
        let bf = b as f64;
        *v = -5.0
            + 4.5 * (-(bf - c1).powi(2) / 32.0).exp()
            + 3.5 * (-(bf - c2).powi(2) / 72.0).exp()
            + 0.4 * speaker as f64 * bf / (N_MELS - 1) as f64;
    }
    t
}

#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub lexicon: Lexicon,
    pub utterances: Vec<Utterance>,
}

fn make_lexicon(rng: &mut ChaCha8Rng, vocab_size: usize) -> Lexicon {
    let mut entries = BTreeMap::new();
    while entries.len() < vocab_size {
        let len = rng.random_range(2..=4);
        let mut consonant = rng.random_bool(0.5);
        let mut phones = Vec::with_capacity(len);
        for _ in 0..len {
            let p = if consonant {
                rng.random_range(0..N_CONSONANTS)
            } else {
                rng.random_range(N_CONSONANTS..PHONE_SYMBOLS.len())
            };
            phones.push(p);
            consonant = !consonant;
        }
        let spelling: String = phones.iter().map(|&p| PHONE_SYMBOLS[p]).collect();
        entries.entry(spelling).or_insert(phones);
    }
    Lexicon {
        phone_symbols: PHONE_SYMBOLS.iter().map(|s| s.to_string()).collect(),
        entries,
    }
}

/// Internal break positions: each phrase has at least two words.
fn choose_breaks(rng: &mut ChaCha8Rng, n_words: usize) -> Vec<usize> {
    let wanted = rng.random_range(0..=2usize);
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..16 {
        if chosen.len() == wanted || n_words < 4 {
            break;
        }
        let p = rng.random_range(1..=n_words - 3);
        if chosen.iter().all(|&c| c.abs_diff(p) >= 2) {
            chosen.push(p);
        }
    }
    chosen.push(n_words - 1);
    chosen.sort_unstable();
    chosen
}

fn plan_for(rng: &mut ChaCha8Rng, word: usize, avoid: Option<PitchPlanKind>) -> PitchPlan {
    let kinds: Vec<PitchPlanKind> = [PitchPlanKind::Rising, PitchPlanKind::Falling, PitchPlanKind::Level]
        .into_iter()
        .filter(|k| Some(*k) != avoid)
        .collect();
    let kind = *kinds.choose(rng).expect("nonempty");
    let mag = rng.random_range(1.5..4.0);
    let slope = match kind {
        PitchPlanKind::Rising => mag,
        PitchPlanKind::Falling => -mag,
        PitchPlanKind::Level => 0.0,
    };
    PitchPlan { word, kind, slope }
}

struct Sentence {
    word_ids: Vec<usize>,
    breaks: Vec<usize>,
    speaker: usize,
}

#[allow(clippy::too_many_arguments)]
fn render(
    rng: &mut ChaCha8Rng,
    id: String,
    lexicon: &Lexicon,
    vocab: &[String],
    sentence: &Sentence,
    plans: Vec<PitchPlan>,
) -> Result<Utterance> {
    let n = sentence.word_ids.len();
    let final_kind = plans.last().map(|p| p.kind);
    let words: Vec<String> = sentence
        .word_ids
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let mut s = vocab[w].clone();
            if i == n - 1 {
                s.push(if final_kind == Some(PitchPlanKind::Rising) {
                    '?'
                } else {
                    '.'
                });
            } else if sentence.breaks.contains(&i) {
                s.push(',');
            }
            s
        })
        .collect();
    let (phones, word_spans) = lexicon.phonemize(&words)?;

    let base = SPEAKER_BASE_F0[sentence.speaker] + rng.random_range(-5.0..5.0);
    let accents: Vec<f64> = (0..n).map(|_| rng.random_range(-12.0..12.0)).collect();
    let silences: Vec<usize> = sentence
        .breaks
        .iter()
        .map(|_| rng.random_range(MIN_SILENCE..=MAX_SILENCE))
        .collect();
    let texture = Normal::new(0.0, TEXTURE_STD).expect("valid std");

    let mut rows: Vec<[f64; N_MELS]> = Vec::new();
    let mut f0 = Vec::new();
    let mut voiced = Vec::new();
    let mut fwa = Vec::new();
    let mut fpa = Vec::new();
    for (w, &(first, last)) in word_spans.iter().enumerate() {
        let word_len: usize = phones[first..=last].iter().map(|&p| phone_frames(p)).sum();
        let slope = plans.iter().find(|p| p.word == w).map_or(0.0, |p| p.slope);
        let mut i = 0usize;
        for (k, &p) in phones.iter().enumerate().take(last + 1).skip(first) {
            let tmpl = phone_template(p, sentence.speaker);
            for _ in 0..phone_frames(p) {
                let hz = base + accents[w] + slope * (i as f64 - (word_len as f64 - 1.0) / 2.0);
                let mut row = tmpl;
                for v in row.iter_mut().skip(1) {
                    *v += texture.sample(rng);
                }
                row[PITCH_BAND] = pitch_to_band(hz);
                rows.push(row);
                let dropped = rng.random_bool(DROPOUT_PROB);
                f0.push(if dropped { 0.0 } else { hz });
                voiced.push(!dropped);
                fwa.push(w as i64);
                fpa.push(k as i64);
                i += 1;
            }
        }
        if let Some(b) = sentence.breaks.iter().position(|&x| x == w) {
            for _ in 0..silences[b] {
                rows.push([SILENCE_LEVEL as f64; N_MELS]);
                f0.push(0.0);
                voiced.push(false);
                fwa.push(-1);
                fpa.push(-1);
            }
        }
    }

    let mut data = Array2::<f32>::zeros((rows.len(), N_MELS));
    for (j, row) in rows.iter().enumerate() {
        for (b, &v) in row.iter().enumerate() {
            data[[j, b]] = v as f32;
        }
    }
    let breaks = BreakAnnotation::new(sentence.breaks.clone(), n)?.with_durations(silences)?;
    let utt = Utterance {
        id,
        words,
        phones,
        word_spans,
        speaker_id: sentence.speaker,
        mel: MelSpectrogram::new(data)?,
        pitch: PitchContour::new(f0, voiced, super::FRAME_RATE)?,
        breaks,
        frame_word_alignment: fwa,
        frame_phone_alignment: fpa,
        pitch_plans: plans,
    };
    utt.validate()?;
    Ok(utt)
}

/// Builds the corpus in memory. Deterministic in all three arguments.
pub fn generate_utterances(n_utts: usize, vocab_size: usize, seed: u64) -> Result<GeneratedCorpus> {
    if n_utts < 1 {
        return Err(Error::InvalidArgument("n_utts must be at least 1".into()));
    }
    if vocab_size < 4 {
        return Err(Error::InvalidArgument("vocab_size must be at least 4".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon = make_lexicon(&mut rng, vocab_size);
    let vocab = lexicon.words();

    let mut utterances = Vec::with_capacity(n_utts);
    for g in 0..n_utts.div_ceil(2) {
        let n_words = rng.random_range(4..=8);
        let sentence = Sentence {
            word_ids: (0..n_words).map(|_| rng.random_range(0..vocab.len())).collect(),
            breaks: choose_breaks(&mut rng, n_words),
            speaker: rng.random_range(0..N_SPEAKERS),
        };
        let mut first_plans: Option<Vec<PitchPlan>> = None;
        for r in 0..2 {
            let index = 2 * g + r;
            if index >= n_utts {
                break;
            }
            let plans: Vec<PitchPlan> = sentence
                .breaks
                .iter()
                .enumerate()
                .map(|(b, &w)| plan_for(&mut rng, w, first_plans.as_ref().map(|p| p[b].kind)))
                .collect();
            let utt = render(
                &mut rng,
                format!("utt{index:04}"),
                &lexicon,
                &vocab,
                &sentence,
                plans.clone(),
            )?;
            utterances.push(utt);
            first_plans.get_or_insert(plans);
        }
    }
    Ok(GeneratedCorpus { lexicon, utterances })
}

/// Generates the corpus and writes it under `dir`.
pub fn generate_toy_corpus(
    dir: impl AsRef<Path>,
    n_utts: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<CorpusManifest> {
    let corpus = generate_utterances(n_utts, vocab_size, seed)?;
    save_corpus(dir, &corpus.lexicon, &corpus.utterances)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentences_come_in_pairs_with_different_terminal_plans() {
        let c = generate_utterances(8, 16, 7).unwrap();
        assert_eq!(c.utterances.len(), 8);
        for pair in c.utterances.chunks(2) {
            let (a, b) = (&pair[0], &pair[1]);
            assert_eq!(a.words.len(), b.words.len());
            assert_eq!(a.breaks.indices(), b.breaks.indices());
            assert_eq!(a.phones, b.phones);
            for (pa, pb) in a.pitch_plans.iter().zip(&b.pitch_plans) {
                assert_ne!(pa.kind, pb.kind);
            }
        }
    }

    #[test]
    fn odd_counts_are_honoured() {
        assert_eq!(generate_utterances(3, 8, 1).unwrap().utterances.len(), 3);
    }

    #[test]
    fn break_spans_are_silent_and_unvoiced() {
        let c = generate_utterances(8, 16, 7).unwrap();
        for u in &c.utterances {
            for j in 0..u.n_frames() {
                let silent = u.frame_word_alignment[j] < 0;
                assert_eq!(silent, u.mel.is_silent(j), "{} frame {j}", u.id);
                if silent {
                    assert!(!u.pitch.voiced[j]);
                }
            }
            let durations = u.breaks.durations().unwrap();
            assert!(durations.iter().all(|&d| (MIN_SILENCE..=MAX_SILENCE).contains(&d)));
            assert!(u.breaks.contains(u.n_words() - 1));
        }
    }

    #[test]
    fn invalid_sizes_are_rejected() {
        assert!(generate_utterances(0, 16, 0).is_err());
        assert!(generate_utterances(4, 3, 0).is_err());
    }
}
