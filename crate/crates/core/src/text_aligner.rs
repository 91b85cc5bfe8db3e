//! Text-side last-word embeddings, trained toward the reference intonation
//! features so that intonation can be queried from text alone.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::corpus::{strip_punctuation, BreakAnnotation};
use crate::error::{Error, Result};
use crate::nn::layers::{Embedding, Linear};
use crate::nn::{Graph, NodeId, ParamStore};

/// Row of the word table shared by every out-of-vocabulary word.
pub const UNK_ROW: usize = 0;

/// Word table followed by a two-layer feed-forward encoder.
#[derive(Debug, Clone)]
pub struct TextAligner {
    vocab: BTreeMap<String, usize>,
    pub table: Embedding,
    pub l1: Linear,
    pub l2: Linear,
}

impl TextAligner {
    /// `words` are bare lexicon entries; row 0 is UNK.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, words: &[String], d_word: usize, d_out: usize) -> Self {
        let vocab: BTreeMap<String, usize> = words.iter().enumerate().map(|(i, w)| (w.clone(), i + 1)).collect();
        Self {
            table: Embedding::new(store, rng, "text_aligner.words", vocab.len() + 1, d_word, 1.0),
            l1: Linear::new(store, rng, "text_aligner.l1", d_word, d_out),
            l2: Linear::new(store, rng, "text_aligner.l2", d_out, d_out),
            vocab,
        }
    }

    pub fn vocab(&self) -> impl Iterator<Item = &str> {
        self.vocab.keys().map(String::as_str)
    }

    pub fn word_row(&self, word: &str) -> usize {
        self.vocab.get(strip_punctuation(word)).copied().unwrap_or(UNK_ROW)
    }

    /// Encodes arbitrary words, one row each.
    pub fn encode_words(&self, g: &mut Graph, store: &ParamStore, words: &[&str]) -> NodeId {
        let rows: Vec<usize> = words.iter().map(|w| self.word_row(w)).collect();
        let x = self.table.forward(g, store, &rows);
        let h = self.l1.forward(g, store, x);
        let h = g.silu(h);
        self.l2.forward(g, store, h)
    }

    /// One embedding per phrase-final word, in word order; `None` without breaks.
    pub fn embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        words: &[String],
        breaks: &BreakAnnotation,
    ) -> Result<Option<NodeId>> {
        breaks.validate(words.len())?;
        if breaks.is_empty() {
            return Ok(None);
        }
        let last: Vec<&str> = breaks.indices().iter().map(|&i| words[i].as_str()).collect();
        Ok(Some(self.encode_words(g, store, &last)))
    }
}

/// Plain-array last-word embeddings, `K × d_out` (zero rows without breaks).
pub fn embed_last_words(
    aligner: &TextAligner,
    store: &ParamStore,
    words: &[String],
    breaks: &BreakAnnotation,
) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    match aligner.embed(&mut g, store, words, breaks)? {
        Some(e) => Ok(g.value(e).clone()),
        None => Ok(Array2::zeros((0, store.value(aligner.l2.w).ncols()))),
    }
}

/// `Σ_k ‖e_k − r_k‖²` with `r` cut from the graph.
pub fn alignment_loss_graph(g: &mut Graph, e: NodeId, r: NodeId) -> Result<NodeId> {
    if g.shape(e) != g.shape(r) {
        return Err(Error::LengthMismatch(format!(
            "embeddings {:?} vs reference features {:?}",
            g.shape(e),
            g.shape(r)
        )));
    }
    let r = g.detach(r);
    let d = g.sub(e, r);
    let sq = g.square(d);
    Ok(g.sum(sq))
}

pub fn alignment_loss(e: &Array2<f64>, r: &Array2<f64>) -> Result<f64> {
    if e.dim() != r.dim() {
        return Err(Error::LengthMismatch(format!(
            "embeddings {:?} vs reference features {:?}",
            e.dim(),
            r.dim()
        )));
    }
    Ok((e - r).mapv(|x| x * x).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn aligner() -> (ParamStore, TextAligner) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let words: Vec<String> = ["ka", "pe", "ti", "so"].iter().map(|s| s.to_string()).collect();
        let a = TextAligner::new(&mut store, &mut rng, &words, 64, 192);
        (store, a)
    }

    #[test]
    fn count_and_context_freedom() {
        let (store, a) = aligner();
        let w = tokenize("ka pe, ti so.");
        let b = BreakAnnotation::new(vec![1, 3], 4).unwrap();
        let e = embed_last_words(&a, &store, &w, &b).unwrap();
        assert_eq!(e.dim(), (2, 192));

        let w2 = tokenize("so ti so");
        let e2 = embed_last_words(&a, &store, &w2, &BreakAnnotation::new(vec![2], 3).unwrap()).unwrap();
        assert_eq!(e.row(1), e2.row(0));
        assert_eq!(
            embed_last_words(&a, &store, &w, &BreakAnnotation::empty())
                .unwrap()
                .nrows(),
            0
        );
    }

    #[test]
    fn unknown_words_share_the_unk_row() {
        let (store, a) = aligner();
        let mut g = Graph::new();
        let e = a.encode_words(&mut g, &store, &["zzz", "qq"]);
        let v = g.value(e);
        assert_eq!(v.row(0), v.row(1));
        assert_eq!(a.word_row("zzz"), UNK_ROW);
    }

    #[test]
    fn loss_examples() {
        let e = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        assert_eq!(alignment_loss(&e, &e).unwrap(), 0.0);
        let mut one = Array2::zeros((1, 192));
        one[[0, 0]] = 1.0;
        assert_eq!(alignment_loss(&one, &Array2::zeros((1, 192))).unwrap(), 1.0);
        assert!(alignment_loss(&one, &Array2::zeros((2, 192))).is_err());
    }

    #[test]
    fn gradient_is_two_e_minus_r_and_r_gets_none() {
        let mut store = ParamStore::new();
        let e_id = store.add("e", ndarray::array![[0.3, -1.2], [2.0, 0.5]]);
        let r_id = store.add("r", ndarray::array![[1.0, 0.0], [-0.5, 0.25]]);
        let mut g = Graph::new();
        let e = g.param(&store, e_id);
        let r = g.param(&store, r_id);
        let l = alignment_loss_graph(&mut g, e, r).unwrap();
        let grads = g.backward(l);
        let expected = (store.value(e_id) - store.value(r_id)) * 2.0;
        assert!((grads.get(e_id).unwrap() - &expected).iter().all(|d| d.abs() < 1e-12));
        assert!(grads.get(r_id).is_none());
    }
}
