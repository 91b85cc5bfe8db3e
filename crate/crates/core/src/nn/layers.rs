//! Building blocks shared by the encoders and the decoder.

use ndarray::Array2;
use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::{normal, xavier, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, fan_in, fan_out));
        let b = store.add(format!("{name}.b"), Array2::zeros((1, fan_out)));
        Self { w, b: Some(b) }
    }

    pub fn no_bias(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, fan_in, fan_out));
        Self { w, b: None }
    }

    /// Output layer initialised to zero, so the module starts as the zero map.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Array2::zeros((fan_in, fan_out)));
        let b = store.add(format!("{name}.b"), Array2::zeros((1, fan_out)));
        Self { w, b: Some(b) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, dim)));
        let beta = store.add(format!("{name}.beta"), Array2::zeros((1, dim)));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let n = g.layer_norm(x, 1e-5);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

/// Kernel-3 convolution along the row (time) axis with zero padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    lin: Linear,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            lin: Linear::new(store, rng, name, 3 * c_in, c_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let prev = g.shift_rows(x, 1);
        let next = g.shift_rows(x, -1);
        let stacked = g.concat_cols(&[prev, x, next]);
        self.lin.forward(g, store, stacked)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, rows: usize, dim: usize, std: f64) -> Self {
        Self {
            table: store.add(format!("{name}.table"), normal(rng, rows, dim, std)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, indices: &[usize]) -> NodeId {
        let t = g.param(store, self.table);
        g.gather_rows(t, indices)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "attention width must divide into heads");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let q = self.q.forward(g, store, x);
        let k = self.k.forward(g, store, x);
        let v = self.v.forward(g, store, x);
        let dim = g.shape(q).1;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let w = g.softmax_rows(scores);
            outs.push(g.matmul(w, vh));
        }
        let cat = g.concat_cols(&outs);
        self.o.forward(g, store, cat)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            l1: Linear::new(store, rng, &format!("{name}.l1"), dim, hidden),
            l2: Linear::new(store, rng, &format!("{name}.l2"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let h = self.l1.forward(g, store, x);
        let h = g.silu(h);
        self.l2.forward(g, store, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), dim, ff_hidden),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let h = self.ln1.forward(g, store, x);
        let h = self.attn.forward(g, store, h);
        let x = g.add(x, h);
        let h = self.ln2.forward(g, store, x);
        let h = self.ff.forward(g, store, h);
        g.add(x, h)
    }
}

/// Single-layer LSTM; [`Lstm::forward`] returns the final hidden state.
#[derive(Debug, Clone)]
pub struct Lstm {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
    hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, hidden: usize) -> Self {
        let w_ih = store.add(format!("{name}.w_ih"), xavier(rng, input, 4 * hidden));
        let w_hh = store.add(format!("{name}.w_hh"), xavier(rng, hidden, 4 * hidden));
        // Forget-gate bias starts at 1.
        let mut b = Array2::zeros((1, 4 * hidden));
        b.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        let b = store.add(format!("{name}.b"), b);
        Self { w_ih, w_hh, b, hidden }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.w_ih, self.w_hh, self.b]
    }

    /// `seq` is `T × input`; gate order is input, forget, cell, output.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: NodeId) -> NodeId {
        let h_dim = self.hidden;
        let steps = g.shape(seq).0;
        let w_ih = g.param(store, self.w_ih);
        let w_hh = g.param(store, self.w_hh);
        let b = g.param(store, self.b);
        let xw = g.matmul(seq, w_ih);
        let xw = g.add_row(xw, b);
        let mut h = g.constant(Array2::zeros((1, h_dim)));
        let mut c = g.constant(Array2::zeros((1, h_dim)));
        for t in 0..steps {
            let xt = g.slice_rows(xw, t, t + 1);
            let hw = g.matmul(h, w_hh);
            let z = g.add(xt, hw);
            let i = g.slice_cols(z, 0, h_dim);
            let f = g.slice_cols(z, h_dim, 2 * h_dim);
            let cc = g.slice_cols(z, 2 * h_dim, 3 * h_dim);
            let o = g.slice_cols(z, 3 * h_dim, 4 * h_dim);
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let cc = g.tanh(cc);
            let o = g.sigmoid(o);
            let fc = g.mul(f, c);
            let ic = g.mul(i, cc);
            c = g.add(fc, ic);
            let tc = g.tanh(c);
            h = g.mul(o, tc);
        }
        h
    }
}

/// Standard transformer sinusoidal table, `n × dim`.
pub fn sinusoidal_positions(n: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, dim), |(pos, i)| {
        let k = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * k / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Sinusoidal embedding of a scalar time `t ∈ [0, 1]`, `1 × dim`.
pub fn time_embedding(t: f64, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    Array2::from_shape_fn((1, dim), |(_, i)| {
        let k = (i % half.max(1)) as f64;
        let freq = (-(10000f64.ln()) * k / half.max(1) as f64).exp();
        let a = 1000.0 * t * freq;
        if i < half {
            a.sin()
        } else {
            a.cos()
        }
    })
}
