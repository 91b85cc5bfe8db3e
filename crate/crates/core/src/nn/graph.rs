//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! Every value is a 2-D `f64` matrix (vectors are `1 × n` rows, scalars are
//! `1 × 1`). A [`Graph`] records operations as they are executed; calling
//! [`Graph::backward`] on a scalar node propagates gradients back to the
//! parameter leaves and returns them as [`Grads`].

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use super::params::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Silu(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Sum(NodeId),
    MeanRows(NodeId),
    SoftmaxRows(NodeId),
    Transpose(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    ShiftRows(NodeId, isize),
    LayerNorm(NodeId, Array2<f64>),
    LogSigmoid(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients keyed by parameter.
#[derive(Debug, Default)]
pub struct Grads {
    map: HashMap<ParamId, Array2<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Array2<f64>)> {
        self.map.iter()
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: Grads) {
        for (id, g) in other.map {
            match self.map.get_mut(&id) {
                Some(acc) => *acc += &g,
                None => {
                    self.map.insert(id, g);
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

fn dims(a: &Array2<f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(dims(v), (1, 1), "scalar() on non-scalar node");
        v[[0, 0]]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        dims(self.value(id))
    }

    /// A constant input; gradients stop here.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// Leaf bound to a trainable parameter. Repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(store.value(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, n);
        n
    }

    /// Copies the value into a fresh constant: the stop-gradient operator.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a + row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, c) = self.shape(row);
        assert!(r == 1 && c == self.shape(a).1, "add_row shape mismatch");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `a * row` elementwise, broadcasting a `1 × n` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, c) = self.shape(row);
        assert!(r == 1 && c == self.shape(a).1, "mul_row shape mismatch");
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a) + s;
        self.push(v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let n = (r * c).max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means, as a `1 × n` row.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows on empty matrix")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    /// Row `i` of the output is row `indices[i]` of `a` (embedding lookup,
    /// alignment expansion, broadcasting).
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let src = self.value(a);
        let mut v = Array2::zeros((indices.len(), src.ncols()));
        for (i, &r) in indices.iter().enumerate() {
            v.row_mut(i).assign(&src.row(r));
        }
        self.push(v, Op::GatherRows(a, indices.to_vec()))
    }

    /// Output row `i` is input row `i - offset`, zero outside the range.
    /// `offset = 1` yields the previous frame at every position.
    pub fn shift_rows(&mut self, a: NodeId, offset: isize) -> NodeId {
        let v = shift(self.value(a), offset);
        self.push(v, Op::ShiftRows(a, offset))
    }

    /// Per-row standardisation to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Array2::zeros((x.nrows(), 1));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std[[i, 0]] = is;
        }
        self.push(out, Op::LayerNorm(a, inv_std))
    }

    /// Reverse pass from a scalar node. Returns gradients for every
    /// parameter that the loss depends on.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward() needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Grads::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    out.map.insert(*pid, g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &g * self.value(*row);
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g * *s),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let ga = &g * &node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = &g * &node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Silu(a) => {
                    let d = self.value(*a).mapv(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    acc(&mut grads, *a, g * d);
                }
                Op::Exp(a) => {
                    let ga = &g * &node.value;
                    acc(&mut grads, *a, ga);
                }
                Op::LogSigmoid(a) => {
                    let d = self.value(*a).mapv(|x| 1.0 - sigmoid(x));
                    acc(&mut grads, *a, g * d);
                }
                Op::Square(a) => {
                    let ga = &g * &self.value(*a).mapv(|x| 2.0 * x);
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let row = &g / r as f64;
                    let ga = row.broadcast((r, c)).expect("broadcast").to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.sum();
                        grow.zip_mut_with(&yrow, |gv, &yv| *gv -= yv * dot);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(&mut grads, p, g.slice(s![.., c0..c0 + w]).to_owned());
                        c0 += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        acc(&mut grads, p, g.slice(s![r0..r0 + h, ..]).to_owned());
                        r0 += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, indices) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (i, &r) in indices.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ShiftRows(a, offset) => acc(&mut grads, *a, shift(&g, -offset)),
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut ga = g.clone();
                    for (i, mut row) in ga.rows_mut().into_iter().enumerate() {
                        let yrow = y.row(i);
                        let mean_g = row.sum() / n;
                        let mean_gy = row.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        let is = inv_std[[i, 0]];
                        row.zip_mut_with(&yrow, |gv, &yv| *gv = is * (*gv - mean_g - yv * mean_gy));
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn shift(x: &Array2<f64>, offset: isize) -> Array2<f64> {
    let n = x.nrows() as isize;
    let mut out = Array2::zeros(x.raw_dim());
    for i in 0..n {
        let src = i - offset;
        if (0..n).contains(&src) {
            out.row_mut(i as usize).assign(&x.row(src as usize));
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of d(sum(f(x) * w))/dx for a unary graph op.
    fn check_unary(f: impl Fn(&mut Graph, NodeId) -> NodeId, x: Array2<f64>) {
        let mut store = ParamStore::new();
        let pid = store.add("x", x.clone());
        let (rows, cols) = {
            let mut g = Graph::new();
            let xn = g.param(&store, pid);
            let y = f(&mut g, xn);
            g.shape(y)
        };
        let w = Array2::from_shape_fn((rows, cols), |(i, j)| 0.3 + 0.1 * i as f64 - 0.07 * j as f64);
        let eval = |store: &ParamStore| {
            let mut g = Graph::new();
            let xn = g.param(store, pid);
            let y = f(&mut g, xn);
            let wn = g.constant(w.clone());
            let p = g.mul(y, wn);
            let l = g.sum(p);
            (g.scalar(l), g.backward(l))
        };
        let (_, grads) = eval(&store);
        let analytic = grads.get(pid).unwrap().clone();
        let eps = 1e-6;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let orig = store.value(pid)[[i, j]];
                store.value_mut(pid)[[i, j]] = orig + eps;
                let (lp, _) = eval(&store);
                store.value_mut(pid)[[i, j]] = orig - eps;
                let (lm, _) = eval(&store);
                store.value_mut(pid)[[i, j]] = orig;
                let numeric = (lp - lm) / (2.0 * eps);
                let a = analytic[[i, j]];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs()),
                    "({i},{j}): {a} vs {numeric}"
                );
            }
        }
    }

    fn x23() -> Array2<f64> {
        array![[0.5, -1.2, 0.3], [2.0, 0.1, -0.7]]
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        check_unary(|g, x| g.tanh(x), x23());
        check_unary(|g, x| g.sigmoid(x), x23());
        check_unary(|g, x| g.silu(x), x23());
        check_unary(|g, x| g.exp(x), x23());
        check_unary(|g, x| g.log_sigmoid(x), x23());
        check_unary(|g, x| g.square(x), x23());
        check_unary(|g, x| g.softmax_rows(x), x23());
        check_unary(|g, x| g.layer_norm(x, 1e-5), x23());
        check_unary(|g, x| g.transpose(x), x23());
        check_unary(|g, x| g.mean_rows(x), x23());
        check_unary(|g, x| g.shift_rows(x, 1), x23());
        check_unary(|g, x| g.shift_rows(x, -1), x23());
        check_unary(|g, x| g.gather_rows(x, &[1, 0, 1, 1]), x23());
        check_unary(|g, x| g.slice_cols(x, 1, 3), x23());
        check_unary(|g, x| g.slice_rows(x, 1, 2), x23());
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let b = array![[0.2, 0.4], [-0.3, 1.1], [0.9, -0.5]];
        check_unary(
            move |g, x| {
                let bn = g.constant(b.clone());
                g.matmul(x, bn)
            },
            x23(),
        );
        check_unary(|g, x| g.mul(x, x), x23());
        check_unary(
            |g, x| {
                let r = g.slice_rows(x, 0, 1);
                g.mul_row(x, r)
            },
            x23(),
        );
        check_unary(
            |g, x| {
                let r = g.slice_rows(x, 1, 2);
                g.add_row(x, r)
            },
            x23(),
        );
        check_unary(
            |g, x| {
                let t = g.tanh(x);
                g.concat_cols(&[x, t])
            },
            x23(),
        );
        check_unary(
            |g, x| {
                let t = g.scale(x, -2.0);
                let c = g.concat_rows(&[t, x]);
                g.sub(c, c)
            },
            x23(),
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", array![[1.0, 2.0]]);
        let mut g = Graph::new();
        let x = g.param(&store, p);
        let d = g.detach(x);
        let y = g.square(d);
        let l = g.sum(y);
        let grads = g.backward(l);
        assert!(grads.get(p).is_none());
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::new();
        let p = store.add("p", array![[3.0]]);
        let mut g = Graph::new();
        let a = g.param(&store, p);
        let b = g.param(&store, p);
        let y = g.mul(a, b);
        let l = g.sum(y);
        let grads = g.backward(l);
        assert_eq!(grads.get(p).unwrap()[[0, 0]], 6.0);
    }
}
