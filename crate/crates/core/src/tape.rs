//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`]; nodes only reference
//! earlier nodes, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep that visits each node once.
//!
//! Operations that are awkward to express as a chain of primitives (the
//! structural-similarity losses, fake quantization) plug in through
//! [`CustomOp`], which supplies a hand-written vector-Jacobian product.

use crate::error::{LabError, Result};
use crate::tensor::{gemm_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input, `None` where the input does not
    /// need one. `needs[i]` tells whether input `i` requires a gradient.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    RoundSte { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    RepeatLeading(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f64, f64)> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LabError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn trailing_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<usize> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
        return Err(LabError::shape(op, sa, sb));
    }
    Ok(b.numel())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output shape and data of `x` with axes reordered so that output axis `i`
/// is input axis `perm[i]`.
fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        // odometer increment over the output index
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Round half away from zero.
pub fn round_half_away(x: f64) -> f64 {
    // f64::round already rounds half-way cases away from zero.
    x.round()
}

fn softmax_rows(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, orow) in data.chunks(width).zip(out.chunks_mut(width)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.as_ref()?.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    /// Clears gradients so that [`Tape::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product. Supported ranks: `[m,k]x[k,n]`, `[b,m,k]x[b,k,n]` and
    /// `[b,m,k]x[k,n]` (shared right operand).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a x b^T`, transposing the last two axes of `b`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || LabError::shape("matmul", &sa, &sb);
        let (batch, m, k) = match sa.len() {
            2 => (1, sa[0], sa[1]),
            3 => (sa[0], sa[1], sa[2]),
            _ => return Err(err()),
        };
        let (b_batched, kb, n) = match (sb.len(), trans_b) {
            (2, false) => (false, sb[0], sb[1]),
            (2, true) => (false, sb[1], sb[0]),
            (3, false) => (true, sb[1], sb[2]),
            (3, true) => (true, sb[2], sb[1]),
            _ => return Err(err()),
        };
        if kb != k || (b_batched && (sa.len() != 3 || sb[0] != batch)) {
            return Err(err());
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        if b_batched {
            for i in 0..batch {
                gemm_acc(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                    trans_b,
                );
            }
        } else {
            gemm_acc(av, bv, &mut out, batch * m, k, n, false, trans_b);
        }
        let shape = if sa.len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, trans_b }, rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(name, self.value(a), self.value(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Ok(Tensor::from_parts(x.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a` (row bias,
    /// positional table).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let w = trailing_shape("add_broadcast", self.value(a), self.value(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(w) {
            for (v, &bb) in row.iter_mut().zip(y.data()) {
                *v += bb;
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddBroadcast(a, b), rg))
    }

    /// `a * b` with the same broadcasting rule as [`Tape::add_broadcast`].
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let w = trailing_shape("mul_broadcast", self.value(a), self.value(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(w) {
            for (v, &bb) in row.iter_mut().zip(y.data()) {
                *v *= bb;
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MulBroadcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(t, Op::Log(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the input was clipped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(t, Op::Clamp { x: a, lo, hi }, rg)
    }

    /// Round half away from zero with a straight-through gradient: the
    /// upstream gradient passes unchanged where the input lies in `[lo, hi]`
    /// and is zeroed elsewhere.
    pub fn round_ste(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(round_half_away);
        let rg = self.rg(a);
        self.push(t, Op::RoundSte { x: a, lo, hi }, rg)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(LabError::shape("permute", x.shape(), perm));
        }
        let (shape, data) = permute_data(x.data(), x.shape(), perm);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Permute { x: a, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(LabError::shape("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// The sub-range `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(LabError::shape("narrow", shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Narrow { x: a, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| LabError::invalid("concat of zero tensors"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(LabError::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(LabError::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let d = self.value(p).data();
                data.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Stacks `n` copies of `a` along a new leading axis.
    pub fn repeat_leading(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(LabError::invalid("repeat_leading with n = 0"));
        }
        let x = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(x.shape());
        let data = x.data().repeat(n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::RepeatLeading(a), rg))
    }

    // ---- normalization --------------------------------------------------

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let w = *x.shape().last().unwrap();
        let data = softmax_rows(x.data(), w);
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let w = *x.shape().last().unwrap();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(w) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let w = *xv.shape().last().unwrap();
        if self.shape(gamma) != [w] || self.shape(beta) != [w] {
            return Err(LabError::shape("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut data = vec![0.0; xv.numel()];
        let mut stats = Vec::with_capacity(xv.numel() / w);
        for (row, orow) in xv.data().chunks(w).zip(data.chunks_mut(w)) {
            let mu = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for i in 0..w {
                orow[i] = (row[i] - mu) * rstd * g[i] + b[i];
            }
            stats.push((mu, rstd));
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, stats }, rg))
    }

    // ---- extension ------------------------------------------------------

    /// Records an externally computed `output` whose backward rule is `op`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates d(loss)/d(node) for every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(LabError::BackwardTwice);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(LabError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Err(LabError::DetachedGraph);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let out = &node.value;
        // Adds into the gradient buffer of `v`, allocating it on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (sa, sb) = (av.shape(), bv.shape());
                let (batch, m, k) = if sa.len() == 3 {
                    (sa[0], sa[1], sa[2])
                } else {
                    (1, sa[0], sa[1])
                };
                let b_batched = sb.len() == 3;
                let n = out.shape()[out.rank() - 1];
                acc(*a, &mut |ga| {
                    // dA = dC * op(B)^T
                    if b_batched {
                        for t in 0..batch {
                            gemm_acc(
                                &g[t * m * n..(t + 1) * m * n],
                                &bv.data()[t * k * n..(t + 1) * k * n],
                                &mut ga[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                                false,
                                !trans_b,
                            );
                        }
                    } else {
                        gemm_acc(g, bv.data(), ga, batch * m, n, k, false, !trans_b);
                    }
                });
                acc(*b, &mut |gb| {
                    // dB = A^T dC (or dC^T A when B enters transposed)
                    if b_batched {
                        for t in 0..batch {
                            let a_t = &av.data()[t * m * k..(t + 1) * m * k];
                            let g_t = &g[t * m * n..(t + 1) * m * n];
                            let gb_t = &mut gb[t * k * n..(t + 1) * k * n];
                            if *trans_b {
                                gemm_acc(g_t, a_t, gb_t, n, m, k, true, false);
                            } else {
                                gemm_acc(a_t, g_t, gb_t, k, m, n, true, false);
                            }
                        }
                    } else if *trans_b {
                        gemm_acc(g, av.data(), gb, n, batch * m, k, true, false);
                    } else {
                        gemm_acc(av.data(), g, gb, k, batch * m, n, true, false);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::AddBroadcast(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| {
                    let w = gb.len();
                    for row in g.chunks(w) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::MulBroadcast(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let w = bv.len();
                acc(*a, &mut |ga| {
                    for (j, x) in ga.iter_mut().enumerate() {
                        *x += g[j] * bv[j % w];
                    }
                });
                acc(*b, &mut |gb| {
                    for (j, (gv, xv)) in g.iter().zip(av).enumerate() {
                        gb[j % w] += gv * xv;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddScalar(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for (j, x) in ga.iter_mut().enumerate() {
                    *x += g[j] * out.data()[j];
                }
            }),
            Op::Log(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for (j, x) in ga.iter_mut().enumerate() {
                        *x += g[j] / av[j];
                    }
                })
            }
            Op::Gelu(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for (j, x) in ga.iter_mut().enumerate() {
                        *x += g[j] * gelu_grad(av[j]);
                    }
                })
            }
            Op::Clamp { x: a, lo, hi } | Op::RoundSte { x: a, lo, hi } => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for (j, x) in ga.iter_mut().enumerate() {
                        if av[j] >= *lo && av[j] <= *hi {
                            *x += g[j];
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => acc(*a, &mut |ga| {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s)
            }),
            Op::Reshape(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::Permute { x: a, perm } => {
                let inv = inverse_perm(perm);
                let (_, back) = permute_data(g, out.shape(), &inv);
                acc(*a, &mut |ga| ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
            }
            Op::Narrow { x: a, axis, start } => {
                let in_shape = nodes[a.0].value.shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let ext = in_shape[*axis];
                let len = out.shape()[*axis];
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let dst = (o * ext + start) * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            ga[dst + j] += g[src + j];
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ext = nodes[p.0].value.shape()[*axis];
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ext * inner;
                            for j in 0..ext * inner {
                                gp[dst + j] += g[src + j];
                            }
                        }
                    });
                    offset += ext;
                }
            }
            Op::RepeatLeading(a) => acc(*a, &mut |ga| {
                let w = ga.len();
                for row in g.chunks(w) {
                    ga.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }),
            Op::Softmax(a) => {
                let w = *out.shape().last().unwrap();
                acc(*a, &mut |ga| {
                    for ((grow, yrow), gout) in ga.chunks_mut(w).zip(out.data().chunks(w)).zip(g.chunks(w)) {
                        let dot: f64 = yrow.iter().zip(gout).map(|(y, d)| y * d).sum();
                        for j in 0..w {
                            grow[j] += yrow[j] * (gout[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let w = *out.shape().last().unwrap();
                acc(*a, &mut |ga| {
                    for ((grow, lrow), gout) in ga.chunks_mut(w).zip(out.data().chunks(w)).zip(g.chunks(w)) {
                        let s: f64 = gout.iter().sum();
                        for j in 0..w {
                            grow[j] += gout[j] - lrow[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xv = nodes[x.0].value.data();
                let gv = nodes[gamma.0].value.data();
                let w = gv.len();
                let xhat = |r: usize, j: usize| (xv[r * w + j] - stats[r].0) * stats[r].1;
                acc(*gamma, &mut |gg| {
                    for r in 0..stats.len() {
                        for j in 0..w {
                            gg[j] += g[r * w + j] * xhat(r, j);
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for row in g.chunks(w) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, &(_, rstd)) in stats.iter().enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..w {
                            let d = g[r * w + j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xhat(r, j);
                        }
                        mean_d /= w as f64;
                        mean_dx /= w as f64;
                        for j in 0..w {
                            let d = g[r * w + j] * gv[j];
                            gx[r * w + j] += rstd * (d - mean_d - xhat(r, j) * mean_dx);
                        }
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| nodes[v.0].requires_grad).collect();
                let parts = op.backward(&ins, out, g, &needs);
                for (v, part) in inputs.iter().zip(parts) {
                    if let Some(part) = part {
                        acc(*v, &mut |gv| gv.iter_mut().zip(&part).for_each(|(x, y)| *x += y));
                    }
                }
            }
        }
    }
}
