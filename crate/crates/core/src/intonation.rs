//! Terminal intonation encoder: reference encoder over last-word pitch shape
//! segments, multi-head attention over a bank of intonation shape tokens, and
//! the align attention that maps reference last words onto target last words.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{LayerNorm, Linear, Lstm};
use crate::nn::{normal, Graph, NodeId, ParamId, ParamStore};
use crate::pitch::PitchShapeSegment;

/// Scale applied to perturbed pitch values before the recurrence.
const VALUE_SCALE: f64 = 0.002;
/// Scale applied to the per-frame pitch change.
const DELTA_SCALE: f64 = 0.5;

/// Encoder input for a segment: one row `[v·0.01, Δv·0.5]` per frame, Δv = 0 on the first frame.
pub fn segment_features(segment: &PitchShapeSegment) -> Result<Array2<f64>> {
    if segment.is_empty() {
        return Err(Error::EmptySegment);
    }
    let v = &segment.values;
    Ok(Array2::from_shape_fn((v.len(), 2), |(i, j)| {
        if j == 0 {
            v[i] * VALUE_SCALE
        } else if i == 0 {
            0.0
        } else {
            (v[i] - v[i - 1]) * DELTA_SCALE
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntonationDims {
    pub d_ref: usize,
    pub n_tokens: usize,
    pub d_token: usize,
    pub heads: usize,
    pub d_out: usize,
}

/// LSTM over segment features; the layer-normalised final hidden state is
/// the reference feature.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    pub lstm: Lstm,
    pub norm: LayerNorm,
}

impl ReferenceEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d_ref: usize) -> Self {
        Self {
            lstm: Lstm::new(store, rng, "intonation.ref_encoder", 2, d_ref),
            norm: LayerNorm::new(store, "intonation.ref_encoder.norm", d_ref),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.lstm.param_ids().to_vec();
        ids.extend([self.norm.gamma, self.norm.beta]);
        ids
    }

    /// `1 × d_ref` feature node for one segment.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, segment: &PitchShapeSegment) -> Result<NodeId> {
        let x = g.constant(segment_features(segment)?);
        let h = self.lstm.forward(g, store, x);
        Ok(self.norm.forward(g, store, h))
    }

    /// `K × d_ref` features, one row per segment.
    pub fn encode_all(&self, g: &mut Graph, store: &ParamStore, segments: &[PitchShapeSegment]) -> Result<NodeId> {
        if segments.is_empty() {
            return Err(Error::NoReferenceLastWords);
        }
        let rows = segments
            .iter()
            .map(|s| self.encode(g, store, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(g.concat_rows(&rows))
    }
}

/// Convenience: the reference feature of one segment as a plain vector.
pub fn reference_encode(
    encoder: &ReferenceEncoder,
    store: &ParamStore,
    segment: &PitchShapeSegment,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let h = encoder.encode(&mut g, store, segment)?;
    Ok(g.value(h).iter().copied().collect())
}

/// Multi-head attention of reference features over the token bank.
#[derive(Debug, Clone)]
pub struct TokenAttention {
    pub bank: ParamId,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Output of [`TokenAttention::forward`].
#[derive(Debug, Clone, Copy)]
pub struct TokenAttentionOutput {
    /// `K × d_out` projected embeddings.
    pub embedding: NodeId,
    /// `K × d_token` concatenated per-head weighted token sums, before projection.
    pub pre_projection: NodeId,
    /// One `K × n_tokens` weight matrix per head.
    pub weights: [Option<NodeId>; 8],
}

impl TokenAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, dims: IntonationDims) -> Self {
        assert!(
            dims.d_token.is_multiple_of(dims.heads) && dims.heads <= 8,
            "token width must split into at most 8 heads"
        );
        let bank = store.add("intonation.tokens", normal(rng, dims.n_tokens, dims.d_token, 1.0));
        Self {
            bank,
            q: Linear::no_bias(store, rng, "intonation.token_attn.q", dims.d_ref, dims.d_token),
            k: Linear::no_bias(store, rng, "intonation.token_attn.k", dims.d_token, dims.d_token),
            v: Linear::no_bias(store, rng, "intonation.token_attn.v", dims.d_token, dims.d_token),
            out: Linear::new(store, rng, "intonation.token_attn.out", dims.d_token, dims.d_out),
            heads: dims.heads,
        }
    }

    /// Each head scores the bank with softmax(q_h·k_hᵀ/√d_h) and takes the
    /// weighted sum of its value slice; heads are concatenated and projected.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: NodeId) -> TokenAttentionOutput {
        let bank = g.param(store, self.bank);
        let q = self.q.forward(g, store, query);
        let k = self.k.forward(g, store, bank);
        let v = self.v.forward(g, store, bank);
        let d = g.shape(q).1;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut weights = [None; 8];
        let mut outs = Vec::with_capacity(self.heads);
        for (h, slot) in weights.iter_mut().enumerate().take(self.heads) {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let s = g.scale(s, scale);
            let w = g.softmax_rows(s);
            *slot = Some(w);
            outs.push(g.matmul(w, vh));
        }
        let pre_projection = g.concat_cols(&outs);
        let embedding = self.out.forward(g, store, pre_projection);
        TokenAttentionOutput {
            embedding,
            pre_projection,
            weights,
        }
    }
}

/// Scaled dot-product attention of target queries over reference keys.
/// Returns the `K_t × d_v` outputs and the `K_t × K_r` weights.
pub fn align_attention_graph(g: &mut Graph, queries: NodeId, keys: NodeId, values: NodeId) -> Result<(NodeId, NodeId)> {
    if g.shape(keys).0 == 0 {
        return Err(Error::NoReferenceLastWords);
    }
    if g.shape(keys).0 != g.shape(values).0 {
        return Err(Error::LengthMismatch(format!(
            "{} keys, {} values",
            g.shape(keys).0,
            g.shape(values).0
        )));
    }
    let d = g.shape(queries).1;
    let kt = g.transpose(keys);
    let s = g.matmul(queries, kt);
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    let w = g.softmax_rows(s);
    Ok((g.matmul(w, values), w))
}

/// Plain-array align attention.
pub fn align_attention(queries: &Array2<f64>, keys: &Array2<f64>, values: &Array2<f64>) -> Result<Array2<f64>> {
    if queries.ncols() != keys.ncols() {
        return Err(Error::LengthMismatch(format!(
            "query width {} vs key width {}",
            queries.ncols(),
            keys.ncols()
        )));
    }
    let mut g = Graph::new();
    let q = g.constant(queries.clone());
    let k = g.constant(keys.clone());
    let v = g.constant(values.clone());
    let (out, _) = align_attention_graph(&mut g, q, k, v)?;
    Ok(g.value(out).clone())
}

/// The whole encoder: reference encoder, token attention, the learned map of
/// reference features into the text-embedding space (align-attention keys and
/// alignment targets) and the fallback embedding for references without last words.
#[derive(Debug, Clone)]
pub struct IntonationEncoder {
    pub reference: ReferenceEncoder,
    pub tokens: TokenAttention,
    pub ref_proj: Linear,
    pub default_embedding: ParamId,
    pub dims: IntonationDims,
}

/// Graph nodes produced for a set of reference segments.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceIntonation {
    /// `K × d_ref`.
    pub features: NodeId,
    /// `K × d_out` keys in text-embedding space.
    pub keys: NodeId,
    /// `K × d_out` last-word intonation embeddings.
    pub values: NodeId,
    pub attention: TokenAttentionOutput,
}

impl IntonationEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, dims: IntonationDims) -> Self {
        Self {
            reference: ReferenceEncoder::new(store, rng, dims.d_ref),
            tokens: TokenAttention::new(store, rng, dims),
            ref_proj: Linear::new(store, rng, "intonation.ref_proj", dims.d_ref, dims.d_out),
            default_embedding: store.add("intonation.default", Array2::zeros((1, dims.d_out))),
            dims,
        }
    }

    pub fn encode_reference(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        segments: &[PitchShapeSegment],
    ) -> Result<ReferenceIntonation> {
        let features = self.reference.encode_all(g, store, segments)?;
        let keys = self.ref_proj.forward(g, store, features);
        let attention = self.tokens.forward(g, store, features);
        Ok(ReferenceIntonation {
            features,
            keys,
            values: attention.embedding,
            attention,
        })
    }

    /// Aligned intonation per target last word; the default embedding for all
    /// of them when the reference has no last words.
    pub fn align(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: NodeId,
        reference: Option<&ReferenceIntonation>,
    ) -> Result<NodeId> {
        match reference {
            Some(r) => Ok(align_attention_graph(g, queries, r.keys, r.values)?.0),
            None => Ok(self.default_rows(g, store, g.shape(queries).0)),
        }
    }

    /// `n` copies of the default embedding.
    pub fn default_rows(&self, g: &mut Graph, store: &ParamStore, n: usize) -> NodeId {
        let d = g.param(store, self.default_embedding);
        g.gather_rows(d, &vec![0; n])
    }
}
