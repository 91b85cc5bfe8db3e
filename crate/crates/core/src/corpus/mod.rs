//! Data model, the synthetic pseudo-speech corpus generator and file IO.

mod generate;
mod io;
mod tensor;

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pitch::PitchContour;

pub use generate::{
    generate_toy_corpus, generate_utterances, phone_frames, phone_template, GeneratedCorpus, N_SPEAKERS,
};
pub use io::{
    load_corpus, load_lexicon, read_manifest, save_corpus, save_utterance, write_manifest, CorpusManifest,
    ManifestEntry, ANNOTATION_VERSION, LEXICON_FILE, MANIFEST_FILE, MANIFEST_VERSION,
};
pub use tensor::{decode_tensor, encode_tensor, read_tensor, write_tensor, TENSOR_MAGIC};

pub const N_MELS: usize = 80;
pub const SAMPLE_RATE: u32 = 22050;
pub const HOP_LENGTH: u32 = 256;
pub const WIN_LENGTH: u32 = 1024;
pub const N_FFT: u32 = 1024;
pub const FRAME_RATE: f64 = SAMPLE_RATE as f64 / HOP_LENGTH as f64;

/// Mel band that mirrors the normalised pitch of each voiced frame.
pub const PITCH_BAND: usize = 0;
/// Log-mel level written into every band of a silent frame.
pub const SILENCE_LEVEL: f32 = -11.5;
/// Frames whose mean log-mel energy falls below this are silent.
pub const SILENCE_THRESHOLD: f64 = -10.0;
/// Reference f0 and scale of the pitch band: `band = (f0 - 150) / 10`.
pub const PITCH_BAND_CENTER: f64 = 150.0;
pub const PITCH_BAND_SCALE: f64 = 10.0;

pub fn pitch_to_band(f0: f64) -> f64 {
    (f0 - PITCH_BAND_CENTER) / PITCH_BAND_SCALE
}

pub fn band_to_pitch(v: f64) -> f64 {
    PITCH_BAND_CENTER + PITCH_BAND_SCALE * v
}

/// Log-mel spectrogram, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub data: Array2<f32>,
}

impl MelSpectrogram {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.ncols() != N_MELS {
            return Err(Error::InvalidArgument(format!(
                "mel must have {N_MELS} bands, got {}",
                data.ncols()
            )));
        }
        if data.nrows() == 0 {
            return Err(Error::InvalidArgument("mel must have at least one frame".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("mel contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.data.ncols()
    }

    /// Mean log-mel value of frame `j`.
    pub fn frame_energy(&self, j: usize) -> f64 {
        self.data.row(j).iter().map(|&v| v as f64).sum::<f64>() / self.n_mels() as f64
    }

    pub fn is_silent(&self, j: usize) -> bool {
        self.frame_energy(j) < SILENCE_THRESHOLD
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(|v| v as f64)
    }

    /// Reads a pitch contour off the pitch band: voiced where the frame is
    /// not silent.
    pub fn pitch_proxy(&self) -> PitchContour {
        let mut f0 = Vec::with_capacity(self.frames());
        let mut voiced = Vec::with_capacity(self.frames());
        for j in 0..self.frames() {
            let hz = band_to_pitch(self.data[[j, PITCH_BAND]] as f64);
            let v = !self.is_silent(j) && hz > 1.0;
            f0.push(if v { hz } else { 0.0 });
            voiced.push(v);
        }
        PitchContour {
            f0,
            voiced,
            frame_rate: FRAME_RATE,
        }
    }
}

/// Phrase-final ("last") word indices, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BreakAnnotation {
    last_word_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    break_durations: Option<Vec<usize>>,
}

impl BreakAnnotation {
    /// Validates and sorts; duplicates are rejected.
    pub fn new(mut indices: Vec<usize>, n_words: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("duplicate break index".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_words) {
            return Err(Error::BreakOutOfRange {
                index: bad,
                words: n_words,
            });
        }
        Ok(Self {
            last_word_indices: indices,
            break_durations: None,
        })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_durations(mut self, durations: Vec<usize>) -> Result<Self> {
        if durations.len() != self.last_word_indices.len() {
            return Err(Error::LengthMismatch(format!(
                "{} durations for {} breaks",
                durations.len(),
                self.last_word_indices.len()
            )));
        }
        if durations.iter().any(|&d| d < 1) {
            return Err(Error::InvalidArgument(
                "break durations must be at least one frame".into(),
            ));
        }
        self.break_durations = Some(durations);
        Ok(self)
    }

    pub fn indices(&self) -> &[usize] {
        &self.last_word_indices
    }

    pub fn durations(&self) -> Option<&[usize]> {
        self.break_durations.as_deref()
    }

    pub fn len(&self) -> usize {
        self.last_word_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.last_word_indices.is_empty()
    }

    pub fn contains(&self, word: usize) -> bool {
        self.last_word_indices.binary_search(&word).is_ok()
    }

    /// Same indices without durations.
    pub fn locations(&self) -> Self {
        Self {
            last_word_indices: self.last_word_indices.clone(),
            break_durations: None,
        }
    }

    /// Checks the indices against a word count.
    pub fn validate(&self, n_words: usize) -> Result<()> {
        Self::new(self.last_word_indices.clone(), n_words).map(|_| ())
    }

    pub(crate) fn insert_index(&mut self, word: usize) -> bool {
        match self.last_word_indices.binary_search(&word) {
            Ok(_) => false,
            Err(pos) => {
                self.last_word_indices.insert(pos, word);
                self.break_durations = None;
                true
            }
        }
    }

    pub(crate) fn remove_index(&mut self, word: usize) -> bool {
        match self.last_word_indices.binary_search(&word) {
            Ok(pos) => {
                self.last_word_indices.remove(pos);
                self.break_durations = None;
                true
            }
            Err(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PitchPlanKind {
    Rising,
    Falling,
    Level,
}

/// Terminal pitch plan of one phrase-final word: `f0(i) = level + slope · (i − (L−1)/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchPlan {
    pub word: usize,
    pub kind: PitchPlanKind,
    /// Hz per frame.
    pub slope: f64,
}

/// Strips trailing punctuation from a text token.
pub fn strip_punctuation(word: &str) -> &str {
    word.trim_end_matches(|c: char| c.is_ascii_punctuation())
}

/// Word → phone-id pronunciation table plus the phone symbol inventory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub phone_symbols: Vec<String>,
    pub entries: BTreeMap<String, Vec<usize>>,
}

impl Lexicon {
    pub fn n_phones(&self) -> usize {
        self.phone_symbols.len()
    }

    /// Id of the break sentinel token, one past the last phone.
    pub fn brk_id(&self) -> usize {
        self.phone_symbols.len()
    }

    /// Pronunciation of a text token, punctuation ignored.
    pub fn lookup(&self, word: &str) -> Result<&[usize]> {
        self.entries
            .get(strip_punctuation(word))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    /// Phones and inclusive per-word phone spans for a token sequence.
    #[allow(clippy::type_complexity)]
    pub fn phonemize(&self, words: &[String]) -> Result<(Vec<usize>, Vec<(usize, usize)>)> {
        let mut phones = Vec::new();
        let mut spans = Vec::with_capacity(words.len());
        for w in words {
            let p = self.lookup(w)?;
            let start = phones.len();
            phones.extend_from_slice(p);
            spans.push((start, phones.len() - 1));
        }
        Ok((phones, spans))
    }

    /// Sorted bare word list.
    pub fn words(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

/// Splits text on whitespace into tokens, keeping punctuation attached.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// The corpus unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Text tokens, trailing punctuation attached.
    pub words: Vec<String>,
    pub phones: Vec<usize>,
    /// Inclusive `(first_phone, last_phone)` per word.
    pub word_spans: Vec<(usize, usize)>,
    pub speaker_id: usize,
    pub mel: MelSpectrogram,
    pub pitch: PitchContour,
    pub breaks: BreakAnnotation,
    /// Word index per frame, −1 for silence.
    pub frame_word_alignment: Vec<i64>,
    /// Phone index (position in `phones`) per frame, −1 for silence.
    pub frame_phone_alignment: Vec<i64>,
    pub pitch_plans: Vec<PitchPlan>,
}

impl Utterance {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn n_frames(&self) -> usize {
        self.mel.frames()
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::Load {
            id: self.id.clone(),
            reason,
        };
        if self.word_spans.len() != self.words.len() {
            return Err(fail(format!(
                "{} spans for {} words",
                self.word_spans.len(),
                self.words.len()
            )));
        }
        let mut next = 0;
        for (w, &(a, b)) in self.word_spans.iter().enumerate() {
            if a != next || b < a {
                return Err(fail(format!(
                    "word {w} span ({a},{b}) does not continue the partition at {next}"
                )));
            }
            next = b + 1;
        }
        if next != self.phones.len() {
            return Err(fail(format!("word spans cover {next} of {} phones", self.phones.len())));
        }
        self.breaks
            .validate(self.words.len())
            .map_err(|e| fail(e.to_string()))?;
        let t = self.mel.frames();
        if self.frame_word_alignment.len() != t {
            return Err(fail(format!(
                "word alignment has {} frames, mel {t}",
                self.frame_word_alignment.len()
            )));
        }
        if self.frame_phone_alignment.len() != t {
            return Err(fail(format!(
                "phone alignment has {} frames, mel {t}",
                self.frame_phone_alignment.len()
            )));
        }
        if self.pitch.len() != t {
            return Err(fail(format!("pitch has {} frames, mel {t}", self.pitch.len())));
        }
        if self
            .frame_word_alignment
            .iter()
            .any(|&w| w < -1 || w >= self.words.len() as i64)
        {
            return Err(fail("word alignment index out of range".into()));
        }
        if self
            .frame_phone_alignment
            .iter()
            .any(|&p| p < -1 || p >= self.phones.len() as i64)
        {
            return Err(fail("phone alignment index out of range".into()));
        }
        Ok(())
    }
}
