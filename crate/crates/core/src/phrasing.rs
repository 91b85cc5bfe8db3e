//! Phrase breaks: detection from reference speech, prediction from text, and
//! the BRK-token extended phone sequence used for duration modelling.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{strip_punctuation, BreakAnnotation, MelSpectrogram, Utterance};
use crate::error::{Error, Result};
use crate::metrics::BreakCounts;
use crate::nn::layers::{Embedding, Linear};
use crate::nn::{Adam, AdamConfig, Graph, NodeId, ParamStore};

/// Shortest silence run that counts as a break.
pub const DEFAULT_MIN_GAP_FRAMES: usize = 5;

/// Supplies break locations from reference speech.
pub trait BreakDetector {
    fn detect(&self, utterance: &Utterance) -> Result<BreakAnnotation>;
}

/// Supplies break locations from plain text.
pub trait BreakPredictor {
    fn predict(&self, words: &[String]) -> Result<BreakAnnotation>;
}

/// Silence-run detector.
#[derive(Debug, Clone, Copy)]
pub struct SilenceDetector {
    pub min_gap_frames: usize,
}

impl Default for SilenceDetector {
    fn default() -> Self {
        Self {
            min_gap_frames: DEFAULT_MIN_GAP_FRAMES,
        }
    }
}

impl BreakDetector for SilenceDetector {
    fn detect(&self, utterance: &Utterance) -> Result<BreakAnnotation> {
        Ok(detect_breaks_silence(utterance, self.min_gap_frames))
    }
}

/// Punctuation rule predictor.
#[derive(Debug, Clone, Copy, Default)]
pub struct RulePredictor;

impl BreakPredictor for RulePredictor {
    fn predict(&self, words: &[String]) -> Result<BreakAnnotation> {
        predict_breaks_rule(words)
    }
}

/// Places a break after word `w` iff at least `min_gap_frames` consecutive
/// silent frames directly follow its last frame. The run lengths are kept as
/// break durations.
pub fn detect_breaks_silence(utterance: &Utterance, min_gap_frames: usize) -> BreakAnnotation {
    detect_breaks_in_mel(
        &utterance.mel,
        &utterance.frame_word_alignment,
        utterance.n_words(),
        min_gap_frames,
    )
}

/// [`detect_breaks_silence`] on a bare mel with its per-frame word index.
pub fn detect_breaks_in_mel(
    mel: &MelSpectrogram,
    frame_word_alignment: &[i64],
    n_words: usize,
    min_gap_frames: usize,
) -> BreakAnnotation {
    let mut indices = Vec::new();
    let mut durations = Vec::new();
    for w in 0..n_words {
        let Some(end) = frame_word_alignment.iter().rposition(|&x| x == w as i64) else {
            continue;
        };
        let run = (end + 1..mel.frames()).take_while(|&j| mel.is_silent(j)).count();
        if run >= min_gap_frames.max(1) {
            indices.push(w);
            durations.push(run);
        }
    }
    BreakAnnotation::new(indices, n_words)
        .and_then(|b| b.with_durations(durations))
        .expect("indices come from the word range and runs are nonempty")
}

const BREAK_PUNCTUATION: [char; 6] = [',', '.', ';', ':', '?', '!'];

fn trailing_break_punct(word: &str) -> bool {
    word.chars().last().is_some_and(|c| BREAK_PUNCTUATION.contains(&c))
}

/// Break after every word ending in `, . ; : ? !`, and always after the final word.
pub fn predict_breaks_rule(words: &[String]) -> Result<BreakAnnotation> {
    if words.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot predict breaks for an empty word list".into(),
        ));
    }
    let mut idx: Vec<usize> = words
        .iter()
        .enumerate()
        .filter(|(_, w)| trailing_break_punct(w))
        .map(|(i, _)| i)
        .collect();
    if idx.last() != Some(&(words.len() - 1)) {
        idx.push(words.len() - 1);
    }
    BreakAnnotation::new(idx, words.len())
}

/// One token of the extended sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Token {
    Phone(usize),
    Brk,
}

/// Where a token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenOrigin {
    /// Phone at position `phone` of the phone sequence, inside `word`.
    Phone { word: usize, phone: usize },
    /// Break after `word`.
    Break { word: usize },
}

impl TokenOrigin {
    pub fn word(&self) -> usize {
        match *self {
            TokenOrigin::Phone { word, .. } | TokenOrigin::Break { word } => word,
        }
    }

    pub fn is_break(&self) -> bool {
        matches!(self, TokenOrigin::Break { .. })
    }
}

/// Phones with a BRK sentinel after each phrase-final word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtendedPhoneSequence {
    pub tokens: Vec<Token>,
    pub origin: Vec<TokenOrigin>,
}

impl ExtendedPhoneSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_breaks(&self) -> usize {
        self.tokens.iter().filter(|t| matches!(t, Token::Brk)).count()
    }

    /// Embedding ids; BRK maps to `brk_id`.
    pub fn ids(&self, brk_id: usize) -> Vec<usize> {
        self.tokens
            .iter()
            .map(|t| match *t {
                Token::Phone(p) => p,
                Token::Brk => brk_id,
            })
            .collect()
    }

    /// Phrase index of every token. A phrase ends at (and includes) a BRK
    /// token; tokens after the last BRK form an unterminated phrase whose
    /// index equals the number of breaks.
    /// Per token, the phone's index from the start and from the end of its
    /// word; BRK tokens get `(0, 0)`.
    pub fn word_positions(&self, word_spans: &[(usize, usize)]) -> Vec<(usize, usize)> {
        self.origin
            .iter()
            .map(|o| match *o {
                TokenOrigin::Phone { word, phone } => {
                    let (a, b) = word_spans[word];
                    (phone - a, b - phone)
                }
                TokenOrigin::Break { .. } => (0, 0),
            })
            .collect()
    }

    pub fn phrase_index(&self) -> Vec<usize> {
        let mut p = 0;
        self.tokens
            .iter()
            .map(|t| {
                let here = p;
                if matches!(t, Token::Brk) {
                    p += 1;
                }
                here
            })
            .collect()
    }
}

/// Inserts a BRK token after the last phone of every phrase-final word.
pub fn insert_break_tokens(
    phones: &[usize],
    word_spans: &[(usize, usize)],
    breaks: &BreakAnnotation,
) -> Result<ExtendedPhoneSequence> {
    breaks.validate(word_spans.len())?;
    let mut tokens = Vec::with_capacity(phones.len() + breaks.len());
    let mut origin = Vec::with_capacity(phones.len() + breaks.len());
    for (w, &(a, b)) in word_spans.iter().enumerate() {
        if b >= phones.len() || a > b {
            return Err(Error::InvalidArgument(format!(
                "word span ({a},{b}) outside {} phones",
                phones.len()
            )));
        }
        for (k, &p) in phones.iter().enumerate().take(b + 1).skip(a) {
            tokens.push(Token::Phone(p));
            origin.push(TokenOrigin::Phone { word: w, phone: k });
        }
        if breaks.contains(w) {
            tokens.push(Token::Brk);
            origin.push(TokenOrigin::Break { word: w });
        }
    }
    Ok(ExtendedPhoneSequence { tokens, origin })
}

pub const BREAK_CLASS_NON_FINAL: usize = 0;
pub const BREAK_CLASS_FINAL: usize = 1;
pub const BREAK_CLASS_BRK: usize = 2;

/// Row of the break embedding table used by each token.
pub fn break_classes(extended: &ExtendedPhoneSequence, breaks: &BreakAnnotation) -> Vec<usize> {
    extended
        .origin
        .iter()
        .map(|o| match o {
            TokenOrigin::Break { .. } => BREAK_CLASS_BRK,
            TokenOrigin::Phone { word, .. } if breaks.contains(*word) => BREAK_CLASS_FINAL,
            TokenOrigin::Phone { .. } => BREAK_CLASS_NON_FINAL,
        })
        .collect()
}

/// Learned {non-final, phrase-final, BRK} embedding table.
#[derive(Debug, Clone)]
pub struct BreakEmbedding {
    pub table: Embedding,
}

impl BreakEmbedding {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, dim: usize) -> Self {
        Self {
            table: Embedding::new(store, rng, "phrasing.break_embedding", 3, dim, 0.3),
        }
    }

    /// Per-token break embeddings, `len × dim`.
    pub fn embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        extended: &ExtendedPhoneSequence,
        breaks: &BreakAnnotation,
    ) -> NodeId {
        self.table.forward(g, store, &break_classes(extended, breaks))
    }
}

/// Plain-array form of [`BreakEmbedding::embed`].
pub fn embed_breaks(extended: &ExtendedPhoneSequence, breaks: &BreakAnnotation, table: &Array2<f64>) -> Array2<f64> {
    let classes = break_classes(extended, breaks);
    Array2::from_shape_fn((classes.len(), table.ncols()), |(i, j)| table[[classes[i], j]])
}

// ---------------------------------------------------------------------------
// Learned tagger

const PUNCT_CLASSES: usize = 5;

fn punct_class(word: &str) -> usize {
    match word.chars().last() {
        Some(',') => 1,
        Some('.') => 2,
        Some('?') => 3,
        Some(c) if c.is_ascii_punctuation() => 4,
        _ => 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub embed_dim: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-2,
            embed_dim: 16,
            hidden: 32,
            seed: 0,
        }
    }
}

/// Per-word binary break tagger over word embeddings, the next word's
/// embedding, trailing punctuation and an is-last flag.
#[derive(Debug, Clone)]
pub struct BreakTagger {
    vocab: BTreeMap<String, usize>,
    store: ParamStore,
    emb: Embedding,
    l1: Linear,
    l2: Linear,
}

const UNK: usize = 0;
const END: usize = 1;

impl BreakTagger {
    fn new(vocab: BTreeMap<String, usize>, config: &TaggerConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let emb = Embedding::new(&mut store, &mut rng, "tagger.emb", vocab.len() + 2, d, 0.1);
        let l1 = Linear::new(
            &mut store,
            &mut rng,
            "tagger.l1",
            2 * d + PUNCT_CLASSES + 1,
            config.hidden,
        );
        let l2 = Linear::new(&mut store, &mut rng, "tagger.l2", config.hidden, 1);
        Self {
            vocab,
            store,
            emb,
            l1,
            l2,
        }
    }

    fn word_id(&self, word: &str) -> usize {
        self.vocab.get(strip_punctuation(word)).copied().unwrap_or(UNK)
    }

    fn logits(&self, g: &mut Graph, words: &[String]) -> NodeId {
        let n = words.len();
        let ids: Vec<usize> = words.iter().map(|w| self.word_id(w)).collect();
        let next: Vec<usize> = (0..n).map(|i| if i + 1 < n { ids[i + 1] } else { END }).collect();
        let side = Array2::from_shape_fn((n, PUNCT_CLASSES + 1), |(i, j)| {
            if j == PUNCT_CLASSES {
                (i + 1 == n) as u8 as f64
            } else {
                (punct_class(&words[i]) == j) as u8 as f64
            }
        });
        let e = self.emb.forward(g, &self.store, &ids);
        let en = self.emb.forward(g, &self.store, &next);
        let side = g.constant(side);
        let x = g.concat_cols(&[e, en, side]);
        let h = self.l1.forward(g, &self.store, x);
        let h = g.tanh(h);
        self.l2.forward(g, &self.store, h)
    }

    /// Per-word break probabilities.
    pub fn probabilities(&self, words: &[String]) -> Vec<f64> {
        if words.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::new();
        let z = self.logits(&mut g, words);
        g.value(z).iter().map(|&v| crate::nn::sigmoid(v)).collect()
    }

    /// Thresholds at 0.5.
    pub fn predict_breaks(&self, words: &[String]) -> BreakAnnotation {
        let idx = self
            .probabilities(words)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= 0.5)
            .map(|(i, _)| i)
            .collect();
        BreakAnnotation::new(idx, words.len()).expect("indices are word positions")
    }
}

impl BreakPredictor for BreakTagger {
    fn predict(&self, words: &[String]) -> Result<BreakAnnotation> {
        Ok(self.predict_breaks(words))
    }
}

/// Trains a tagger on `(words, breaks)` pairs by full-batch BCE with Adam.
pub fn fit_break_tagger(examples: &[(Vec<String>, BreakAnnotation)], config: &TaggerConfig) -> Result<BreakTagger> {
    let examples: Vec<_> = examples.iter().filter(|(w, _)| !w.is_empty()).collect();
    if examples.is_empty() {
        return Err(Error::Training(
            "no annotated utterances to train the break tagger on".into(),
        ));
    }
    for (words, breaks) in &examples {
        breaks.validate(words.len())?;
    }
    let mut vocab = BTreeMap::new();
    for (words, _) in &examples {
        for w in words {
            let next = vocab.len() + 2;
            vocab.entry(strip_punctuation(w).to_string()).or_insert(next);
        }
    }
    let mut tagger = BreakTagger::new(vocab, config);
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
        &tagger.store,
    );
    let total_words: usize = examples.iter().map(|(w, _)| w.len()).sum();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a66);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut g = Graph::new();
        let mut terms = Vec::with_capacity(examples.len());
        for &i in &order {
            let (words, breaks) = examples[i];
            let z = tagger.logits(&mut g, words);
            let y = Array2::from_shape_fn((words.len(), 1), |(j, _)| breaks.contains(j) as u8 as f64);
            let y = g.constant(y);
            // y·log σ(z) + (1 − y)·log σ(−z)
            let pos = g.log_sigmoid(z);
            let nz = g.scale(z, -1.0);
            let neg = g.log_sigmoid(nz);
            let a = g.mul(y, pos);
            let one_minus = g.scale(y, -1.0);
            let one_minus = g.add_scalar(one_minus, 1.0);
            let b = g.mul(one_minus, neg);
            let s = g.add(a, b);
            terms.push(g.sum(s));
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = g.add(loss, t);
        }
        let loss = g.scale(loss, -1.0 / total_words as f64);
        let grads = g.backward(loss);
        adam.update(&mut tagger.store, &grads);
    }
    Ok(tagger)
}

/// Trains on annotations produced by `detector` over the corpus.
pub fn train_break_tagger(
    corpus: &[Utterance],
    detector: &dyn BreakDetector,
    config: &TaggerConfig,
) -> Result<BreakTagger> {
    let examples = corpus
        .iter()
        .map(|u| Ok((u.words.clone(), detector.detect(u)?)))
        .collect::<Result<Vec<_>>>()?;
    fit_break_tagger(&examples, config)
}

/// Micro-averaged scores, with and without the sentence-final break.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub with_final: BreakCounts,
    pub without_final: BreakCounts,
}

pub fn evaluate_predictor(
    predictor: &dyn BreakPredictor,
    examples: &[(Vec<String>, BreakAnnotation)],
) -> Result<PredictorReport> {
    let mut with_final = BreakCounts::default();
    let mut without_final = BreakCounts::default();
    for (words, gt) in examples {
        let pred = predictor.predict(words)?;
        with_final.add(gt.indices(), pred.indices());
        let last = words.len().saturating_sub(1);
        let strip = |b: &BreakAnnotation| b.indices().iter().copied().filter(|&i| i != last).collect::<Vec<_>>();
        without_final.add(&strip(gt), &strip(&pred));
    }
    Ok(PredictorReport {
        with_final,
        without_final,
    })
}

impl fmt::Display for PredictorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>9} {:>9} {:>9}", "", "precision", "recall", "f1")?;
        for (name, c) in [
            ("with final break", self.with_final),
            ("without final break", self.without_final),
        ] {
            let s = c.scores();
            writeln!(f, "{:<24} {:>9.4} {:>9.4} {:>9.4}", name, s.precision, s.recall, s.f1)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_utterances, tokenize};

    fn words(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn rule_predictor_examples() {
        let b = predict_breaks_rule(&words("I saw the man, with the telescope.")).unwrap();
        assert_eq!(b.indices(), &[3, 6]);
        assert_eq!(
            predict_breaks_rule(&words("no punctuation here")).unwrap().indices(),
            &[2]
        );
        assert_eq!(predict_breaks_rule(&words("Go!")).unwrap().indices(), &[0]);
        assert!(predict_breaks_rule(&[]).is_err());
    }

    #[test]
    fn detector_reproduces_generator_breaks() {
        let corpus = generate_utterances(8, 12, 3).unwrap();
        for u in &corpus.utterances {
            let d = detect_breaks_silence(u, DEFAULT_MIN_GAP_FRAMES);
            assert_eq!(d.indices(), u.breaks.indices(), "{}", u.id);
            assert_eq!(d.durations(), u.breaks.durations());
            assert!(detect_breaks_silence(u, 100).is_empty());
        }
    }

    #[test]
    fn no_silence_means_no_breaks() {
        let corpus = generate_utterances(1, 8, 1).unwrap();
        let mut u = corpus.utterances[0].clone();
        u.mel.data.fill(0.0);
        assert!(detect_breaks_silence(&u, 1).is_empty());
    }

    #[test]
    fn insert_break_tokens_examples() {
        let phones = vec![0, 14, 1, 15, 2, 16];
        let spans = vec![(0, 1), (2, 3), (4, 5)];
        let b = BreakAnnotation::new(vec![1], 3).unwrap();
        let ext = insert_break_tokens(&phones, &spans, &b).unwrap();
        assert_eq!(ext.len(), 7);
        assert_eq!(ext.tokens[4], Token::Brk);
        assert_eq!(ext.origin[4], TokenOrigin::Break { word: 1 });

        let ident = insert_break_tokens(&phones, &spans, &BreakAnnotation::empty()).unwrap();
        assert_eq!(ident.ids(99), phones);

        let all = BreakAnnotation::new(vec![0, 1, 2], 3).unwrap();
        assert_eq!(insert_break_tokens(&phones, &spans, &all).unwrap().len(), 9);
        assert_eq!(
            insert_break_tokens(&phones, &spans, &all).unwrap().phrase_index(),
            vec![0, 0, 0, 1, 1, 1, 2, 2, 2]
        );
    }

    #[test]
    fn out_of_range_break_is_rejected() {
        let bad = BreakAnnotation::new(vec![5], 6).unwrap();
        assert!(matches!(
            insert_break_tokens(&[0, 1], &[(0, 0), (1, 1)], &bad),
            Err(Error::BreakOutOfRange { index: 5, words: 2 })
        ));
    }

    #[test]
    fn break_embedding_differs_only_on_edited_word() {
        let phones = vec![0, 14, 1, 15, 2, 16];
        let spans = vec![(0, 1), (2, 3), (4, 5)];
        let table = ndarray::array![[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]];
        let b0 = BreakAnnotation::new(vec![2], 3).unwrap();
        let none = BreakAnnotation::empty();
        let e_none = embed_breaks(&insert_break_tokens(&phones, &spans, &none).unwrap(), &none, &table);
        assert!(e_none.rows().into_iter().all(|r| r == table.row(0)));

        let b1 = BreakAnnotation::new(vec![0, 2], 3).unwrap();
        let x0 = insert_break_tokens(&phones, &spans, &b0).unwrap();
        let x1 = insert_break_tokens(&phones, &spans, &b1).unwrap();
        let e0 = embed_breaks(&x0, &b0, &table);
        let e1 = embed_breaks(&x1, &b1, &table);
        assert_eq!(e1.nrows(), x1.len());
        // x1 has the extra BRK at position 2; everything after lines up with x0 shifted by one.
        for i in 0..2 {
            assert_ne!(e0.row(i), e1.row(i));
        }
        assert_eq!(e1.row(2), table.row(BREAK_CLASS_BRK));
        for i in 2..x0.len() {
            assert_eq!(e0.row(i), e1.row(i + 1));
        }
    }

    #[test]
    fn tagger_memorises_small_corpus() {
        let corpus = generate_utterances(8, 12, 5).unwrap();
        let det = SilenceDetector::default();
        let tagger = train_break_tagger(&corpus.utterances, &det, &TaggerConfig::default()).unwrap();
        let examples: Vec<_> = corpus
            .utterances
            .iter()
            .map(|u| (u.words.clone(), det.detect(u).unwrap()))
            .collect();
        let report = evaluate_predictor(&tagger, &examples).unwrap();
        assert_eq!(report.with_final.scores().f1, 1.0, "{report}");
        let text = report.to_string();
        assert!(text.contains("with final break") && text.contains("without final break"));
    }

    #[test]
    fn all_negative_labels_give_empty_predictions() {
        let corpus = generate_utterances(6, 10, 2).unwrap();
        let examples: Vec<_> = corpus
            .utterances
            .iter()
            .map(|u| (u.words.clone(), BreakAnnotation::empty()))
            .collect();
        let tagger = fit_break_tagger(&examples, &TaggerConfig::default()).unwrap();
        for (w, _) in &examples {
            assert!(tagger.predict_breaks(w).is_empty());
        }
    }

    #[test]
    fn empty_corpus_is_a_training_error() {
        assert!(matches!(
            fit_break_tagger(&[], &TaggerConfig::default()),
            Err(Error::Training(_))
        ));
    }
}
