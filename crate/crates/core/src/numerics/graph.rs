//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list is
//! already topologically sorted. [`Graph::backward`] walks it in reverse and
//! accumulates adjoints. Gradients are additive across calls until
//! [`Graph::zero_grad`].

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_a_bt_into, matmul_at_b_into, matmul_into, Tensor};
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Ln,
    Softplus,
    Tanh,
    Sigmoid,
    Relu,
    Square,
    Sqrt,
    Recip,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddLastVec(Var, Var),
    MulLastVec(Var, Var),
    ScaleRows(Var, Var),
    Broadcast(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    SumAll(Var),
    SumAxis(Var, usize),
    Unary(Var, Unary),
    ClampMin(Var, f64),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    LayerNormLast(Var, Vec<f64>),
    L2NormLast(Var),
    GatherLast(Var, Vec<usize>),
    Unfold1d { x: Var, len: usize, ch: usize, kernel: usize, stride: usize, pad: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    track_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// `[outer, axis_len, inner]` view of `shape` around `axis`.
fn axis_view(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap();
    let n: usize = shape.iter().product();
    (n / c, c)
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    /// Graph whose parameter leaves participate in differentiation.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), params: HashMap::new(), track_params: true }
    }

    /// Graph that treats parameters as constants, for evaluation.
    pub fn inference() -> Self {
        Self { track_params: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let track = self.track_params && store.trainable(id);
        let v = self.push(store.value(id).clone(), Op::Leaf, track);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary_same(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// `x[..., j] + b[j]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.last_vec(x, b, "add_bias", |v, w| v + w, Op::AddLastVec(x, b))
    }

    /// `x[..., j] * g[j]`.
    pub fn mul_last(&mut self, x: Var, g: Var) -> Result<Var> {
        self.last_vec(x, g, "mul_last", |v, w| v * w, Op::MulLastVec(x, g))
    }

    fn last_vec(&mut self, x: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = *tx.shape().last().unwrap();
        if tb.len() != c {
            return Err(shape_err(name, tx.shape(), tb.shape()));
        }
        let bd = tb.data();
        let data = tx.data().chunks(c).flat_map(|row| row.iter().zip(bd).map(|(&v, &w)| f(v, w))).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    /// Scales slice `i` along axis 0 of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let r = tx.shape()[0];
        if ts.len() != r {
            return Err(shape_err("scale_rows", tx.shape(), ts.shape()));
        }
        let cols = tx.len() / r;
        let sd = ts.data();
        let data = tx.data().chunks(cols).zip(sd).flat_map(|(row, &k)| row.iter().map(move |&v| v * k)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::ScaleRows(x, s), rg))
    }

    /// Repeats a single-element tensor to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_scalar() {
            return Err(shape_err("broadcast", ta.shape(), shape));
        }
        let t = Tensor::full(shape, ta.item());
        let rg = self.rg(a);
        Ok(self.push(t, Op::Broadcast(a), rg))
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |x| -x,
            Unary::Exp => f64::exp,
            Unary::Ln => f64::ln,
            Unary::Softplus => softplus,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Relu => |x| if x > 0.0 { x } else { 0.0 },
            Unary::Square => |x| x * x,
            Unary::Sqrt => f64::sqrt,
            Unary::Recip => |x| 1.0 / x,
        };
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, Op::Unary(a, kind), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }
    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    /// `max(a, floor)`; entries below the floor get zero gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a).map(|x| x.max(floor));
        let rg = self.rg(a);
        self.push(t, Op::ClampMin(a, floor), rg)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// `[B, m, k] x [B, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] || ta.shape()[2] != tb.shape()[1] {
            return Err(shape_err("batch_matmul", ta.shape(), tb.shape()));
        }
        let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            matmul_into(&ta.data()[i * m * k..(i + 1) * m * k], &tb.data()[i * k * n..(i + 1) * k * n], &mut out[i * m * n..(i + 1) * m * n], m, k, n);
        }
        let t = Tensor::new(vec![bs, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::BatchMatMul(a, b), rg))
    }

    /// Swaps the last two axes (rank 2 or 3).
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let perm = match ta.rank() {
            2 => vec![1, 0],
            3 => vec![0, 2, 1],
            _ => return Err(NumericsError::Shape(format!("transpose: unsupported rank of {:?}", ta.shape()))),
        };
        let t = permute_tensor(ta, &perm);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let mut seen = vec![false; ta.rank()];
        if perm.len() != ta.rank() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", ta.shape(), perm));
        }
        let t = permute_tensor(ta, perm);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| NumericsError::Shape("concat of nothing".into()))?);
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_view(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let tp = self.value(p);
                let chunk = tp.shape()[axis] * inner;
                data.extend_from_slice(&tp.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() || start >= end || end > ta.shape()[axis] {
            return Err(NumericsError::Shape(format!("slice: range {start}..{end} on axis {axis} out of bounds for {:?}", ta.shape())));
        }
        let (outer, len, inner) = axis_view(ta.shape(), axis);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&ta.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = end - start;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Slice(a, axis, start), rg))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() {
            return Err(shape_err("sum_axis", ta.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_view(ta.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &ta.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let t = Tensor::new(drop_axis(ta.shape(), axis), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = self.shape(a).get(axis).copied().unwrap_or(1) as f64;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len))
    }

    // ---- normalization and nonlinearity over the last axis ----------------

    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (_, c) = last_dim(ta.shape());
        let mut data = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut z = 0.0;
            for &x in row {
                let e = (x - mx).exp();
                z += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v /= z;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxLast(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (_, c) = last_dim(ta.shape());
        let mut data = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmaxLast(a), rg)
    }

    /// Zero-mean unit-variance normalization of every last-axis row (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let (_, c) = last_dim(ta.shape());
        let mut data = Vec::with_capacity(ta.len());
        let mut rstds = Vec::with_capacity(ta.len() / c);
        for row in ta.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            rstds.push(rstd);
            data.extend(row.iter().map(|&x| (x - mean) * rstd));
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::LayerNormLast(a, rstds), rg)
    }

    /// Euclidean norm of every last-axis row.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (_, c) = last_dim(ta.shape());
        let data: Vec<f64> = ta.data().chunks(c).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let shape = drop_axis(ta.shape(), ta.rank() - 1);
        let t = Tensor::new(shape, data).expect("reduced shape");
        let rg = self.rg(a);
        self.push(t, Op::L2NormLast(a), rg)
    }

    /// Picks `a[i, idx[i]]` from a `[R, C]` tensor.
    pub fn gather_last(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = last_dim(ta.shape());
        if idx.len() != r {
            return Err(shape_err("gather_last", ta.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(NumericsError::Index(format!("gather_last: index {bad} out of range for {c} columns")));
        }
        let data = idx.iter().enumerate().map(|(i, &j)| ta.data()[i * c + j]).collect();
        let t = Tensor::new(vec![r], data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::GatherLast(a, idx.to_vec()), rg))
    }

    /// Mean cross-entropy of `[B, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.log_softmax(logits);
        let picked = self.gather_last(ls, labels)?;
        let m = self.mean(picked);
        Ok(self.neg(m))
    }

    /// Per-row cross-entropy of `[B, C]` logits, shape `[B]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.log_softmax(logits);
        let picked = self.gather_last(ls, labels)?;
        Ok(self.neg(picked))
    }

    /// Sliding windows over `[B, len, ch]` (time-major) input with zero
    /// padding, producing `[B * len_out, kernel * ch]` patches.
    pub fn unfold1d(&mut self, x: Var, len: usize, ch: usize, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let tx = self.value(x);
        if !tx.len().is_multiple_of(len * ch) || kernel == 0 || stride == 0 || len + 2 * pad < kernel {
            return Err(NumericsError::Shape(format!(
                "unfold1d: input {:?} incompatible with len={len} ch={ch} kernel={kernel} stride={stride} pad={pad}",
                tx.shape()
            )));
        }
        let b = tx.len() / (len * ch);
        let len_out = (len + 2 * pad - kernel) / stride + 1;
        let mut data = vec![0.0; b * len_out * kernel * ch];
        let src = tx.data();
        for bi in 0..b {
            for t in 0..len_out {
                let dst = &mut data[(bi * len_out + t) * kernel * ch..(bi * len_out + t + 1) * kernel * ch];
                for k in 0..kernel {
                    let pos = (t * stride + k) as isize - pad as isize;
                    if pos < 0 || pos as usize >= len {
                        continue;
                    }
                    let s = (bi * len + pos as usize) * ch;
                    dst[k * ch..(k + 1) * ch].copy_from_slice(&src[s..s + ch]);
                }
            }
        }
        let t = Tensor::new(vec![b * len_out, kernel * ch], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Unfold1d { x, len, ch, kernel, stride, pad }, rg))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        // Seed on a fresh adjoint buffer so earlier accumulations are preserved
        // without re-propagating them.
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lo, _) = adj.split_at_mut(i);
            propagate(&self.nodes, node, &g, lo);
            match &mut self.grads[i] {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Adds parameter-leaf gradients into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                store.add_grad(id, g);
            }
        }
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut data = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; rank];
    let src = t.data();
    for _ in 0..t.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permuted shape")
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn acc_slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn acc_with(nodes: &[Node], adj: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if let Some(slot) = acc_slot(nodes, adj, v) {
        f(slot);
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_with(nodes, adj, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc_with(nodes, adj, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
        }
        Op::Sub(a, b) => {
            acc_with(nodes, adj, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            acc_with(nodes, adj, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            acc_with(nodes, adj, *a, |d| {
                for ((x, gy), w) in d.iter_mut().zip(g).zip(vb) {
                    *x += gy * w;
                }
            });
            acc_with(nodes, adj, *b, |d| {
                for ((x, gy), w) in d.iter_mut().zip(g).zip(va) {
                    *x += gy * w;
                }
            });
        }
        Op::Scale(a, c) => acc_with(nodes, adj, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
        Op::AddScalar(a) => acc_with(nodes, adj, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
        Op::AddLastVec(x, b) => {
            let c = val(*b).len();
            acc_with(nodes, adj, *x, |d| d.iter_mut().zip(g).for_each(|(p, q)| *p += q));
            acc_with(nodes, adj, *b, |d| {
                for row in g.chunks(c) {
                    d.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                }
            });
        }
        Op::MulLastVec(x, s) => {
            let (vx, vs) = (val(*x).data(), val(*s).data());
            let c = vs.len();
            acc_with(nodes, adj, *x, |d| {
                for (drow, grow) in d.chunks_mut(c).zip(g.chunks(c)) {
                    for ((p, q), w) in drow.iter_mut().zip(grow).zip(vs) {
                        *p += q * w;
                    }
                }
            });
            acc_with(nodes, adj, *s, |d| {
                for (xrow, grow) in vx.chunks(c).zip(g.chunks(c)) {
                    for ((p, q), w) in d.iter_mut().zip(grow).zip(xrow) {
                        *p += q * w;
                    }
                }
            });
        }
        Op::ScaleRows(x, s) => {
            let (vx, vs) = (val(*x).data(), val(*s).data());
            let cols = vx.len() / vs.len();
            acc_with(nodes, adj, *x, |d| {
                for ((drow, grow), &k) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(vs) {
                    drow.iter_mut().zip(grow).for_each(|(p, q)| *p += q * k);
                }
            });
            acc_with(nodes, adj, *s, |d| {
                for ((p, grow), xrow) in d.iter_mut().zip(g.chunks(cols)).zip(vx.chunks(cols)) {
                    *p += grow.iter().zip(xrow).map(|(q, w)| q * w).sum::<f64>();
                }
            });
        }
        Op::Broadcast(a) => acc_with(nodes, adj, *a, |d| d[0] += g.iter().sum::<f64>()),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            acc_with(nodes, adj, *a, |d| matmul_a_bt_into(g, tb.data(), d, m, n, k));
            acc_with(nodes, adj, *b, |d| matmul_at_b_into(ta.data(), g, d, m, k, n));
        }
        Op::BatchMatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
            acc_with(nodes, adj, *a, |d| {
                for i in 0..bs {
                    matmul_a_bt_into(&g[i * m * n..(i + 1) * m * n], &tb.data()[i * k * n..(i + 1) * k * n], &mut d[i * m * k..(i + 1) * m * k], m, n, k);
                }
            });
            acc_with(nodes, adj, *b, |d| {
                for i in 0..bs {
                    matmul_at_b_into(&ta.data()[i * m * k..(i + 1) * m * k], &g[i * m * n..(i + 1) * m * n], &mut d[i * k * n..(i + 1) * k * n], m, k, n);
                }
            });
        }
        Op::Transpose(a) => {
            let perm = if out.rank() == 2 { vec![1, 0] } else { vec![0, 2, 1] };
            let gt = permute_tensor(&Tensor::new(out.shape().to_vec(), g.to_vec()).expect("grad shape"), &perm);
            acc_with(nodes, adj, *a, |d| d.iter_mut().zip(gt.data()).for_each(|(p, q)| *p += q));
        }
        Op::Permute(a, perm) => {
            let inv = inverse_perm(perm);
            let gt = permute_tensor(&Tensor::new(out.shape().to_vec(), g.to_vec()).expect("grad shape"), &inv);
            acc_with(nodes, adj, *a, |d| d.iter_mut().zip(gt.data()).for_each(|(p, q)| *p += q));
        }
        Op::Reshape(a) => acc_with(nodes, adj, *a, |d| d.iter_mut().zip(g).for_each(|(p, q)| *p += q)),
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = axis_view(out.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                acc_with(nodes, adj, p, |d| {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                });
                offset += len;
            }
        }
        Op::Slice(a, axis, start) => {
            let (outer, full, inner) = axis_view(val(*a).shape(), *axis);
            let len = out.shape()[*axis];
            acc_with(nodes, adj, *a, |d| {
                for o in 0..outer {
                    let dst = &mut d[(o * full + start) * inner..(o * full + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                }
            });
        }
        Op::SumAll(a) => acc_with(nodes, adj, *a, |d| d.iter_mut().for_each(|x| *x += g[0])),
        Op::SumAxis(a, axis) => {
            let (outer, len, inner) = axis_view(val(*a).shape(), *axis);
            acc_with(nodes, adj, *a, |d| {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
            });
        }
        Op::Unary(a, kind) => {
            let x = val(*a).data();
            let y = out.data();
            acc_with(nodes, adj, *a, |d| {
                for i in 0..d.len() {
                    let local = match kind {
                        Unary::Neg => -1.0,
                        Unary::Exp => y[i],
                        Unary::Ln => 1.0 / x[i],
                        Unary::Softplus => sigmoid(x[i]),
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Square => 2.0 * x[i],
                        Unary::Sqrt => 0.5 / y[i],
                        Unary::Recip => -y[i] * y[i],
                    };
                    d[i] += g[i] * local;
                }
            });
        }
        Op::ClampMin(a, floor) => {
            let x = val(*a).data();
            acc_with(nodes, adj, *a, |d| {
                for i in 0..d.len() {
                    if x[i] >= *floor {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::SoftmaxLast(a) => {
            let (_, c) = last_dim(out.shape());
            acc_with(nodes, adj, *a, |d| {
                for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                    for ((x, gy), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *x += y * (gy - dot);
                    }
                }
            });
        }
        Op::LogSoftmaxLast(a) => {
            let (_, c) = last_dim(out.shape());
            acc_with(nodes, adj, *a, |d| {
                for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let total: f64 = grow.iter().sum();
                    for ((x, gy), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *x += gy - y.exp() * total;
                    }
                }
            });
        }
        Op::LayerNormLast(a, rstds) => {
            let (_, c) = last_dim(out.shape());
            let cf = c as f64;
            acc_with(nodes, adj, *a, |d| {
                for (((drow, grow), yrow), &rstd) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)).zip(rstds) {
                    let mg: f64 = grow.iter().sum::<f64>() / cf;
                    let mgy: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum::<f64>() / cf;
                    for ((x, gy), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *x += rstd * (gy - mg - y * mgy);
                    }
                }
            });
        }
        Op::L2NormLast(a) => {
            let xa = val(*a).data();
            let c = xa.len() / out.len();
            acc_with(nodes, adj, *a, |d| {
                for (((drow, xrow), &nrm), &gy) in d.chunks_mut(c).zip(xa.chunks(c)).zip(out.data()).zip(g) {
                    if nrm > 0.0 {
                        for (p, x) in drow.iter_mut().zip(xrow) {
                            *p += gy * x / nrm;
                        }
                    }
                }
            });
        }
        Op::GatherLast(a, idx) => {
            let c = val(*a).len() / idx.len();
            acc_with(nodes, adj, *a, |d| {
                for (i, &j) in idx.iter().enumerate() {
                    d[i * c + j] += g[i];
                }
            });
        }
        Op::Unfold1d { x, len, ch, kernel, stride, pad } => {
            let (len, ch, kernel, stride, pad) = (*len, *ch, *kernel, *stride, *pad);
            let b = val(*x).len() / (len * ch);
            let len_out = (len + 2 * pad - kernel) / stride + 1;
            acc_with(nodes, adj, *x, |d| {
                for bi in 0..b {
                    for t in 0..len_out {
                        let src = &g[(bi * len_out + t) * kernel * ch..(bi * len_out + t + 1) * kernel * ch];
                        for k in 0..kernel {
                            let pos = (t * stride + k) as isize - pad as isize;
                            if pos < 0 || pos as usize >= len {
                                continue;
                            }
                            let s = (bi * len + pos as usize) * ch;
                            for c in 0..ch {
                                d[s + c] += src[k * ch + c];
                            }
                        }
                    }
                }
            });
        }
    }
}
