//! Text, speaker and fusion encoders, the duration predictor and the decoder.

use ndarray::Array2;
use rand::Rng;

use super::flow::VectorField;
use crate::error::{Error, Result};
use crate::nn::layers::{sinusoidal_positions, time_embedding, Conv1d, Embedding, LayerNorm, Linear, TransformerBlock};
use crate::nn::{Graph, NodeId, ParamStore};

/// Within-word positions at or beyond this share the last embedding row.
pub const MAX_WORD_POSITION: usize = 8;

/// Token embedding + sinusoidal positions + within-word position embeddings
/// + self-attention blocks.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embedding: Embedding,
    /// Phone index counted from the start of its word.
    pub word_pos_start: Embedding,
    /// Phone index counted from the end of its word.
    pub word_pos_end: Embedding,
    pub blocks: Vec<TransformerBlock>,
    pub dim: usize,
    /// Weight of the sinusoidal position signal.
    pub position_scale: f64,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        n_tokens: usize,
        dim: usize,
        n_blocks: usize,
        heads: usize,
        ff_hidden: usize,
    ) -> Self {
        Self {
            embedding: Embedding::new(store, rng, "text_encoder.embedding", n_tokens, dim, 0.3),
            word_pos_start: Embedding::new(store, rng, "text_encoder.word_pos_start", MAX_WORD_POSITION, dim, 0.3),
            word_pos_end: Embedding::new(store, rng, "text_encoder.word_pos_end", MAX_WORD_POSITION, dim, 0.3),
            blocks: (0..n_blocks)
                .map(|b| TransformerBlock::new(store, rng, &format!("text_encoder.block{b}"), dim, heads, ff_hidden))
                .collect(),
            dim,
            position_scale: 0.3,
        }
    }

    /// One hidden row per token id, without within-word positions.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<NodeId> {
        self.forward_in_words(g, store, ids, None)
    }

    /// One hidden row per token id; `word_pos` gives each token's
    /// (from-start, from-end) phone index inside its word.
    pub fn forward_in_words(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
        word_pos: Option<&[(usize, usize)]>,
    ) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty token sequence".into()));
        }
        let mut h = self.embedding.forward(g, store, ids);
        if self.position_scale != 0.0 {
            let pos = g.constant(sinusoidal_positions(ids.len(), self.dim) * self.position_scale);
            h = g.add(h, pos);
        }
        if let Some(wp) = word_pos {
            if wp.len() != ids.len() {
                return Err(Error::LengthMismatch(format!(
                    "{} word positions for {} tokens",
                    wp.len(),
                    ids.len()
                )));
            }
            let clip = |v: usize| v.min(MAX_WORD_POSITION - 1);
            let starts: Vec<usize> = wp.iter().map(|p| clip(p.0)).collect();
            let ends: Vec<usize> = wp.iter().map(|p| clip(p.1)).collect();
            let s = self.word_pos_start.forward(g, store, &starts);
            let e = self.word_pos_end.forward(g, store, &ends);
            h = g.add(h, s);
            h = g.add(h, e);
        }
        for b in &self.blocks {
            h = b.forward(g, store, h);
        }
        Ok(h)
    }
}

/// Speaker identity: either a corpus speaker id or an external 512-D vector.
#[derive(Debug, Clone, PartialEq)]
pub enum SpeakerInput {
    Id(usize),
    Vector(Vec<f64>),
}

/// Id lookup table plus a two-layer map for external speaker vectors.
#[derive(Debug, Clone)]
pub struct SpeakerEncoder {
    pub table: Embedding,
    pub ext1: Linear,
    pub ext2: Linear,
    pub n_speakers: usize,
    pub d_external: usize,
}

impl SpeakerEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        n_speakers: usize,
        d_external: usize,
        hidden: usize,
        dim: usize,
    ) -> Self {
        Self {
            table: Embedding::new(store, rng, "speaker.table", n_speakers, dim, 0.3),
            ext1: Linear::new(store, rng, "speaker.ext1", d_external, hidden),
            ext2: Linear::new(store, rng, "speaker.ext2", hidden, dim),
            n_speakers,
            d_external,
        }
    }

    /// `1 × dim` speaker embedding.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &SpeakerInput) -> Result<NodeId> {
        match input {
            SpeakerInput::Id(id) => {
                if *id >= self.n_speakers {
                    return Err(Error::UnknownSpeaker(*id));
                }
                Ok(self.table.forward(g, store, &[*id]))
            }
            SpeakerInput::Vector(v) => {
                if v.len() != self.d_external {
                    return Err(Error::LengthMismatch(format!(
                        "speaker vector has {} dims, expected {}",
                        v.len(),
                        self.d_external
                    )));
                }
                let x = g.constant(Array2::from_shape_vec((1, v.len()), v.clone()).expect("row vector"));
                let h = self.ext1.forward(g, store, x);
                let h = g.silu(h);
                Ok(self.ext2.forward(g, store, h))
            }
        }
    }
}

/// Output of [`FusionEncoder::forward`].
#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    /// `T × dim` fused hidden states.
    pub hidden: NodeId,
    /// `T × n_mels` prior means.
    pub mu: NodeId,
}

/// Concatenates text, break, intonation and speaker channels per token,
/// projects, runs self-attention blocks and maps to prior means.
#[derive(Debug, Clone)]
pub struct FusionEncoder {
    pub input: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub ln: LayerNorm,
    pub output: Linear,
}

impl FusionEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        d_in: usize,
        dim: usize,
        n_blocks: usize,
        heads: usize,
        ff_hidden: usize,
        n_mels: usize,
    ) -> Self {
        Self {
            input: Linear::new(store, rng, "fusion.input", d_in, dim),
            blocks: (0..n_blocks)
                .map(|b| TransformerBlock::new(store, rng, &format!("fusion.block{b}"), dim, heads, ff_hidden))
                .collect(),
            ln: LayerNorm::new(store, "fusion.ln", dim),
            output: Linear::new(store, rng, "fusion.output", dim, n_mels),
        }
    }

    /// `intonation` is per token (already broadcast to phrases); `speaker` is `1 × d`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        text: NodeId,
        breaks: NodeId,
        intonation: NodeId,
        speaker: NodeId,
    ) -> Result<FusionOutput> {
        let t = g.shape(text).0;
        if g.shape(breaks).0 != t || g.shape(intonation).0 != t {
            return Err(Error::LengthMismatch(format!(
                "fusion inputs have {}, {} and {} rows",
                t,
                g.shape(breaks).0,
                g.shape(intonation).0
            )));
        }
        let spk = g.gather_rows(speaker, &vec![0; t]);
        let x = g.concat_cols(&[text, breaks, intonation, spk]);
        let mut h = self.input.forward(g, store, x);
        for b in &self.blocks {
            h = b.forward(g, store, h);
        }
        let hidden = self.ln.forward(g, store, h);
        let mu = self.output.forward(g, store, hidden);
        Ok(FusionOutput { hidden, mu })
    }
}

/// Two conv–SiLU–LayerNorm layers and a linear head giving log-durations.
#[derive(Debug, Clone)]
pub struct DurationPredictor {
    pub conv1: Conv1d,
    pub ln1: LayerNorm,
    pub conv2: Conv1d,
    pub ln2: LayerNorm,
    pub output: Linear,
}

impl DurationPredictor {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d_in: usize, hidden: usize) -> Self {
        Self {
            conv1: Conv1d::new(store, rng, "duration.conv1", d_in, hidden),
            ln1: LayerNorm::new(store, "duration.ln1", hidden),
            conv2: Conv1d::new(store, rng, "duration.conv2", hidden, hidden),
            ln2: LayerNorm::new(store, "duration.ln2", hidden),
            output: Linear::new(store, rng, "duration.output", hidden, 1),
        }
    }

    /// `T × 1` log-durations. The input is detached here, so no gradient
    /// from this head reaches the encoders.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fused_hidden: NodeId) -> NodeId {
        let x = g.detach(fused_hidden);
        let h = self.conv1.forward(g, store, x);
        let h = g.silu(h);
        let h = self.ln1.forward(g, store, h);
        let h = self.conv2.forward(g, store, h);
        let h = g.silu(h);
        let h = self.ln2.forward(g, store, h);
        self.output.forward(g, store, h)
    }
}

/// `max(1, round(exp(log_d)))` per token.
pub fn inference_durations(log_durations: &[f64]) -> Vec<usize> {
    log_durations
        .iter()
        .map(|&l| l.exp().round().clamp(1.0, 1e6) as usize)
        .collect()
}

/// Mean over tokens of `(pred − log d)²`.
pub fn duration_loss(pred_log_d: &[f64], durations: &[usize]) -> Result<f64> {
    if pred_log_d.len() != durations.len() || durations.is_empty() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} durations",
            pred_log_d.len(),
            durations.len()
        )));
    }
    Ok(pred_log_d
        .iter()
        .zip(durations)
        .map(|(p, &d)| (p - (d as f64).ln()).powi(2))
        .sum::<f64>()
        / durations.len() as f64)
}

pub fn duration_loss_graph(g: &mut Graph, pred_log_d: NodeId, durations: &[usize]) -> Result<NodeId> {
    if g.shape(pred_log_d) != (durations.len(), 1) || durations.is_empty() {
        return Err(Error::LengthMismatch(format!(
            "{:?} predictions for {} durations",
            g.shape(pred_log_d),
            durations.len()
        )));
    }
    let target = g.constant(Array2::from_shape_fn((durations.len(), 1), |(i, _)| {
        (durations[i] as f64).ln()
    }));
    let d = g.sub(pred_log_d, target);
    let sq = g.square(d);
    Ok(g.mean(sq))
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv1d,
    time: Linear,
    conv2: Conv1d,
}

/// Convolutional U-Net-style vector field `u(x_t, c, t)`.
///
/// `[x_t, c]` → conv → +time → residual conv blocks → concat with the
/// pre-block skip → linear → SiLU → zero-initialised output layer.
#[derive(Debug, Clone)]
pub struct Decoder {
    input: Conv1d,
    time1: Linear,
    time2: Linear,
    blocks: Vec<ResBlock>,
    merge: Linear,
    output: Linear,
    d_time: usize,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        n_mels: usize,
        channels: usize,
        n_blocks: usize,
        d_time: usize,
    ) -> Self {
        Self {
            input: Conv1d::new(store, rng, "decoder.input", 2 * n_mels, channels),
            time1: Linear::new(store, rng, "decoder.time1", d_time, channels),
            time2: Linear::new(store, rng, "decoder.time2", channels, channels),
            blocks: (0..n_blocks)
                .map(|b| ResBlock {
                    conv1: Conv1d::new(store, rng, &format!("decoder.block{b}.conv1"), channels, channels),
                    time: Linear::new(store, rng, &format!("decoder.block{b}.time"), channels, channels),
                    conv2: Conv1d::new(store, rng, &format!("decoder.block{b}.conv2"), channels, channels),
                })
                .collect(),
            merge: Linear::new(store, rng, "decoder.merge", 2 * channels, channels),
            output: Linear::zeros(store, "decoder.output", channels, n_mels),
            d_time,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, cond: NodeId, t: f64) -> NodeId {
        let te = g.constant(time_embedding(t, self.d_time));
        let te = self.time1.forward(g, store, te);
        let te = g.silu(te);
        let te = self.time2.forward(g, store, te);
        let xc = g.concat_cols(&[x, cond]);
        let h = self.input.forward(g, store, xc);
        let mut h = g.add_row(h, te);
        let skip = h;
        for b in &self.blocks {
            let y = g.silu(h);
            let y = b.conv1.forward(g, store, y);
            let tb = b.time.forward(g, store, te);
            let y = g.add_row(y, tb);
            let y = g.silu(y);
            let y = b.conv2.forward(g, store, y);
            h = g.add(h, y);
        }
        let cat = g.concat_cols(&[h, skip]);
        let m = self.merge.forward(g, store, cat);
        let m = g.silu(m);
        self.output.forward(g, store, m)
    }
}

/// A decoder bound to its parameters, usable as an ODE field.
pub struct BoundDecoder<'a> {
    pub decoder: &'a Decoder,
    pub store: &'a ParamStore,
}

impl VectorField for BoundDecoder<'_> {
    fn eval(&self, x: &Array2<f64>, cond: &Array2<f64>, t: f64) -> Array2<f64> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let cn = g.constant(cond.clone());
        let u = self.decoder.forward(&mut g, self.store, xn, cn, t);
        g.value(u).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn text_encoder_shapes_and_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, &mut rng, 21, 32, 2, 2, 64);
        for n in [1, 7, 40] {
            let ids: Vec<usize> = (0..n).map(|i| i % 21).collect();
            let mut g = Graph::new();
            let h = enc.forward(&mut g, &store, &ids).unwrap();
            assert_eq!(g.shape(h), (n, 32));
        }
        let run = |ids: &[usize]| {
            let mut g = Graph::new();
            let h = enc.forward(&mut g, &store, ids).unwrap();
            g.value(h).clone()
        };
        let a = run(&[1, 2, 3]);
        assert_eq!(a, run(&[1, 2, 3]));
        let b = run(&[3, 2, 1]);
        assert_ne!(a.row(0), b.row(2));
        let mut g = Graph::new();
        assert!(enc.forward(&mut g, &store, &[]).is_err());
    }

    #[test]
    fn speaker_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let spk = SpeakerEncoder::new(&mut store, &mut rng, 3, 512, 128, 64);
        let mut g = Graph::new();
        let a = spk.forward(&mut g, &store, &SpeakerInput::Id(0)).unwrap();
        let a2 = spk.forward(&mut g, &store, &SpeakerInput::Id(0)).unwrap();
        let b = spk.forward(&mut g, &store, &SpeakerInput::Id(1)).unwrap();
        let v = spk
            .forward(&mut g, &store, &SpeakerInput::Vector(vec![0.1; 512]))
            .unwrap();
        assert_eq!(g.shape(a), (1, 64));
        assert_eq!(g.shape(v), (1, 64));
        assert_eq!(g.value(a), g.value(a2));
        assert_ne!(g.value(a), g.value(b));
        assert!(matches!(
            spk.forward(&mut g, &store, &SpeakerInput::Id(3)),
            Err(Error::UnknownSpeaker(3))
        ));
        assert!(spk
            .forward(&mut g, &store, &SpeakerInput::Vector(vec![0.0; 3]))
            .is_err());
    }

    #[test]
    fn duration_examples() {
        assert_eq!(duration_loss(&[0.0, 1.0], &[1, 1]).unwrap(), 0.5);
        let d = [2usize, 5, 1];
        let exact: Vec<f64> = d.iter().map(|&x| (x as f64).ln()).collect();
        assert_eq!(duration_loss(&exact, &d).unwrap(), 0.0);
        assert_eq!(inference_durations(&[-3.0, 0.2, 1.2, 2.0]), vec![1, 1, 3, 7]);
        assert!(duration_loss(&[0.0], &[1, 2]).is_err());
    }

    #[test]
    fn decoder_starts_as_zero_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut rng, 8, 16, 2, 8);
        let x = normal(&mut rng, 5, 8, 1.0);
        let c = normal(&mut rng, 5, 8, 1.0);
        let u = BoundDecoder {
            decoder: &dec,
            store: &store,
        }
        .eval(&x, &c, 0.3);
        assert_eq!(u.dim(), (5, 8));
        assert!(u.iter().all(|&v| v == 0.0));
    }
}
