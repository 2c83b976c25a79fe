// SPDX-License-Identifier: Apache-2.0

//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value. Node indices are
//! assigned in execution order, so walking the node list backwards visits the
//! graph in reverse topological order. A tape is rebuilt for every episode.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Vector-Jacobian product of an operation defined outside this module.
///
/// `backward` receives the forward inputs, the forward output and the
/// gradient flowing into the output, and returns one gradient per input
/// (`None` when the input does not influence the output).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Dropout(Var, Vec<f64>),
    Sum(Var),
    LogSumExp(Var),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Unfold { a: Var, width: usize },
    SegmentMax { a: Var, argmax: Vec<usize> },
    MeanRows(Var),
    Pick { a: Var, idx: Vec<usize> },
    GatherRows { a: Var, idx: Vec<usize> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of the forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    kink_hash: u64,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .finish()
    }
}

/// Trailing-suffix broadcast: `b` (with leading 1s stripped) must equal the
/// trailing dims of `a`, or be a single value.
fn broadcast_period(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    let nb: usize = b.iter().product();
    if nb == 1 {
        return Ok(1);
    }
    let core: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
    if core.len() <= a.len() && a[a.len() - core.len()..] == core[..] {
        Ok(nb)
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::invalid(op, format!("expected a matrix, got {:?}", t.shape()))),
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

/// Max-shifted `ln Σ exp(x)`. Returns `-inf` only when every entry is `-inf`.
pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src.to_vec()),
    }
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

    /// Drops every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.grads.clear();
        self.kink_hash = 0;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Digest of every nondifferentiable branch taken so far (relu signs,
    /// max-pool winners). Two evaluations with equal digests lie in the
    /// same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    fn note_kink(&mut self, bit: u64) {
        self.kink_hash = (self.kink_hash ^ bit).wrapping_mul(0x0100_0000_01b3);
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// A differentiable input that is not a registered parameter.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push("leaf", t, Op::Leaf, true)
    }

    /// Loads a parameter value onto the tape. Repeated calls return the same
    /// node, so a tape must not outlive changes to the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.tensor(id).clone(),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul", ta)?;
        let (k2, n) = require_matrix("matmul", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let period = broadcast_period(name, ta.shape(), tb.shape())?;
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % period]))
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(name, Tensor::from_parts(shape, data), op, rg)
    }

    /// `a + b`, with `b` broadcast over the leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(name, value, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut bits = 0u64;
        for (i, &x) in self.value(a).data().iter().enumerate() {
            if x > 0.0 {
                bits = bits.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            }
        }
        self.note_kink(bits);
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    /// Inverted dropout. `rng = None` means evaluation mode and returns `a` untouched.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(a) };
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push("dropout", value, Op::Dropout(a, mask), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// `ln Σ exp` over the last axis. The result drops that axis (`[1]` for vectors).
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let data: Vec<f64> = t.data().chunks(n).map(logsumexp_slice).collect();
        let mut shape = t.shape()[..t.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(a);
        self.push("logsumexp", Tensor::from_parts(shape, data), Op::LogSumExp(a), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = require_matrix("slice_rows", t)?;
        if len == 0 || start + len > r {
            return Err(Error::invalid("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        self.push("slice_rows", Tensor::from_parts(vec![len, c], data), Op::SliceRows { a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = require_matrix("slice_cols", t)?;
        if len == 0 || start + len > c {
            return Err(Error::invalid("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        self.push("slice_cols", Tensor::from_parts(vec![r, len], data), Op::SliceCols { a, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let (_, c) = require_matrix("concat_rows", self.value(first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c2) = require_matrix("concat_rows", t)?;
            if c2 != c {
                return Err(Error::shape("concat_rows", self.shape(first), t.shape()));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_rows", Tensor::from_parts(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let (r, _) = require_matrix("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r2, c) = require_matrix("concat_cols", t)?;
            if r2 != r {
                return Err(Error::shape("concat_cols", self.shape(first), t.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_cols", Tensor::from_parts(vec![r, total], data), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Sliding windows of `width` consecutive rows, each flattened into one row.
    /// Inputs with fewer than `width` rows are zero-padded at the end.
    pub fn unfold(&mut self, a: Var, width: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = require_matrix("unfold", t)?;
        if width == 0 {
            return Err(Error::invalid("unfold", "width must be positive"));
        }
        let padded = r.max(width);
        let windows = padded - width + 1;
        let mut data = vec![0.0; windows * width * c];
        for w in 0..windows {
            for off in 0..width {
                let src = w + off;
                if src < r {
                    let dst = (w * width + off) * c;
                    data[dst..dst + c].copy_from_slice(&t.data()[src * c..(src + 1) * c]);
                }
            }
        }
        let rg = self.rg(a);
        self.push("unfold", Tensor::from_parts(vec![windows, width * c], data), Op::Unfold { a, width }, rg)
    }

    /// Column-wise max over consecutive row segments of the given lengths.
    /// Ties go to the earliest row.
    pub fn segment_max(&mut self, a: Var, lengths: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = require_matrix("segment_max", t)?;
        if lengths.contains(&0) || lengths.iter().sum::<usize>() != r {
            return Err(Error::invalid("segment_max", format!("segments {lengths:?} do not tile {r} rows")));
        }
        let mut out = Vec::with_capacity(lengths.len() * c);
        let mut argmax = Vec::with_capacity(lengths.len() * c);
        let mut start = 0;
        for &len in lengths {
            for j in 0..c {
                let mut best = start;
                for i in start + 1..start + len {
                    if t.data()[i * c + j] > t.data()[best * c + j] {
                        best = i;
                    }
                }
                out.push(t.data()[best * c + j]);
                argmax.push(best);
            }
            start += len;
        }
        let bits = argmax
            .iter()
            .fold(0u64, |h, &i| (h ^ i as u64).wrapping_mul(0x0100_0000_01b3));
        self.note_kink(bits);
        let rg = self.rg(a);
        let value = Tensor::from_parts(vec![lengths.len(), c], out);
        self.push("segment_max", value, Op::SegmentMax { a, argmax }, rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = require_matrix("mean_rows", t)?;
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(a);
        self.push("mean_rows", Tensor::from_parts(vec![1, c], out), Op::MeanRows(a), rg)
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = require_matrix("pick", t)?;
        if idx.len() != r || idx.iter().any(|&k| k >= c) {
            return Err(Error::invalid("pick", format!("indices {idx:?} invalid for shape {:?}", t.shape())));
        }
        let data = idx.iter().enumerate().map(|(i, &k)| t.data()[i * c + k]).collect();
        let rg = self.rg(a);
        self.push("pick", Tensor::from_parts(vec![r], data), Op::Pick { a, idx: idx.to_vec() }, rg)
    }

    /// `out[i] = a[idx[i], :]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = require_matrix("gather_rows", t)?;
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::invalid("gather_rows", format!("row indices out of range 0..{r}")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        let value = Tensor::from_parts(vec![idx.len(), c], data);
        self.push("gather_rows", value, Op::GatherRows { a, idx: idx.to_vec() }, rg)
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let name = op.name();
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            name,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse pass from the scalar `loss`. Gradients of parameters loaded with
    /// [`Tape::param`] are added to their buffers in `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (&id, &v) in &self.params {
            let p = store.get_mut(id);
            match &grads[v.0] {
                Some(g) => p.accumulate_grad(g),
                None => {
                    if p.grad.is_none() {
                        p.zero_grad();
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let (ad, bd) = (ta.data(), tb.data());
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    add_into(&mut grads[a.0], &ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = ad[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            gbrow.iter_mut().zip(grow).for_each(|(d, y)| *d += x * y);
                        }
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if wants(*b) {
                    let nb = val(*b).numel();
                    let mut gb = vec![0.0; nb];
                    g.iter().enumerate().for_each(|(j, x)| gb[j % nb] += sign * x);
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let nb = bd.len();
                if wants(*a) {
                    let ga: Vec<f64> = g.iter().enumerate().map(|(j, x)| x * bd[j % nb]).collect();
                    add_into(&mut grads[a.0], &ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; nb];
                    g.iter().enumerate().for_each(|(j, x)| gb[j % nb] += x * ad[j]);
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::AddScalar(a) => add_into(&mut grads[a.0], g),
            Op::Neg(a) => {
                let ga: Vec<f64> = g.iter().map(|x| -x).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, &inp)| if inp > 0.0 { *x } else { 0.0 })
                    .collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g.iter().zip(node.value.data()).map(|(x, s)| x * s * (1.0 - s)).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g.iter().zip(node.value.data()).map(|(x, t)| x * (1.0 - t * t)).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Dropout(a, mask) => {
                let ga: Vec<f64> = g.iter().zip(mask).map(|(x, m)| x * m).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; val(*a).numel()];
                add_into(&mut grads[a.0], &ga);
            }
            Op::LogSumExp(a) => {
                let t = val(*a);
                let n = t.cols();
                let mut ga = vec![0.0; t.numel()];
                for (r, (chunk, out)) in t.data().chunks(n).zip(ga.chunks_mut(n)).enumerate() {
                    let lse = node.value.data()[r];
                    for (o, x) in out.iter_mut().zip(chunk) {
                        *o = g[r] * (x - lse).exp();
                    }
                }
                add_into(&mut grads[a.0], &ga);
            }
            Op::SliceRows { a, start } => {
                let t = val(*a);
                let c = t.cols();
                let mut ga = vec![0.0; t.numel()];
                ga[start * c..start * c + g.len()].copy_from_slice(g);
                add_into(&mut grads[a.0], &ga);
            }
            Op::SliceCols { a, start } => {
                let t = val(*a);
                let (r, c) = (t.rows(), t.cols());
                let len = node.value.cols();
                let mut ga = vec![0.0; t.numel()];
                for row in 0..r {
                    ga[row * c + start..row * c + start + len].copy_from_slice(&g[row * len..(row + 1) * len]);
                }
                add_into(&mut grads[a.0], &ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).numel();
                    if wants(*p) {
                        add_into(&mut grads[p.0], &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if wants(*p) {
                        let mut gp = Vec::with_capacity(r * w);
                        for row in 0..r {
                            gp.extend_from_slice(&g[row * total + off..row * total + off + w]);
                        }
                        add_into(&mut grads[p.0], &gp);
                    }
                    off += w;
                }
            }
            Op::Unfold { a, width } => {
                let t = val(*a);
                let (r, c) = (t.rows(), t.cols());
                let windows = node.value.rows();
                let mut ga = vec![0.0; t.numel()];
                for w in 0..windows {
                    for off in 0..*width {
                        let src = w + off;
                        if src < r {
                            let gsrc = &g[(w * width + off) * c..(w * width + off + 1) * c];
                            ga[src * c..(src + 1) * c].iter_mut().zip(gsrc).for_each(|(d, x)| *d += x);
                        }
                    }
                }
                add_into(&mut grads[a.0], &ga);
            }
            Op::SegmentMax { a, argmax } => {
                let t = val(*a);
                let c = t.cols();
                let mut ga = vec![0.0; t.numel()];
                for (o, (&row, x)) in argmax.iter().zip(g).enumerate() {
                    ga[row * c + o % c] += x;
                }
                add_into(&mut grads[a.0], &ga);
            }
            Op::MeanRows(a) => {
                let t = val(*a);
                let (r, c) = (t.rows(), t.cols());
                let inv = 1.0 / r as f64;
                let ga: Vec<f64> = (0..r * c).map(|j| g[j % c] * inv).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Pick { a, idx } => {
                let t = val(*a);
                let c = t.cols();
                let mut ga = vec![0.0; t.numel()];
                for (row, (&k, x)) in idx.iter().zip(g).enumerate() {
                    ga[row * c + k] += x;
                }
                add_into(&mut grads[a.0], &ga);
            }
            Op::GatherRows { a, idx } => {
                let t = val(*a);
                let c = t.cols();
                let mut ga = vec![0.0; t.numel()];
                for (row, &src) in idx.iter().enumerate() {
                    ga[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(&g[row * c..(row + 1) * c])
                        .for_each(|(d, x)| *d += x);
                }
                add_into(&mut grads[a.0], &ga);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&ins, &node.value, g);
                for (v, gi) in inputs.iter().zip(gs) {
                    if let (true, Some(gi)) = (wants(*v), gi) {
                        add_into(&mut grads[v.0], &gi);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2)).unwrap();
        let m = tape.constant(t2(&[vec![1., 2.], vec![3., 4.]])).unwrap();
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1., 2., 3., 4.]);

        let n = tape.constant(t2(&[vec![5., 6.], vec![7., 8.]])).unwrap();
        let out = tape.matmul(m, n).unwrap();
        assert_eq!(tape.value(out).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn elementwise_definitions() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1., 0., 2.]).unwrap()).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0., 0., 2.]);

        let a = tape.constant(Tensor::vector(vec![1., 2.]).unwrap()).unwrap();
        let b = tape.constant(Tensor::vector(vec![3., 4.]).unwrap()).unwrap();
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4., 6.]);

        let c = tape.constant(Tensor::vector(vec![1., 2., 3.]).unwrap()).unwrap();
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn dropout_eval_identity_and_bad_p() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1., 2., 3.]).unwrap()).unwrap();
        let y = tape.dropout::<ChaCha8Rng>(x, 0.2, None).unwrap();
        assert_eq!(y, x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(tape.dropout(x, 1.0, Some(&mut rng)).is_err());
        assert!(tape.dropout(x, -0.1, Some(&mut rng)).is_err());
    }

    #[test]
    fn dropout_training_scales_survivors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[10_000], 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = tape.dropout(x, 0.2, Some(&mut rng)).unwrap();
        let vals = tape.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
        let dropped = vals.iter().filter(|&&v| v == 0.0).count() as f64 / 10_000.0;
        assert!((dropped - 0.2).abs() < 0.02, "dropped fraction {dropped}");
    }

    #[test]
    fn logsumexp_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0., 0.]).unwrap()).unwrap();
        let l = tape.logsumexp(x).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);

        let x = tape.constant(Tensor::vector(vec![1000., 1000.]).unwrap()).unwrap();
        let l = tape.logsumexp(x).unwrap();
        assert!((tape.value(l).item() - (1000. + 2f64.ln())).abs() < 1e-9);

        // ln(e + e^2 + e^3) evaluated directly at 64-bit.
        let direct = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        let x = tape.constant(Tensor::vector(vec![1., 2., 3.]).unwrap()).unwrap();
        let l = tape.logsumexp(x).unwrap();
        assert!((tape.value(l).item() - direct).abs() < 1e-12);
        assert!((tape.value(l).item() - 3.407606).abs() < 1e-6);
    }

    #[test]
    fn backward_quadratic_and_constant() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::vector(vec![1., 2.]).unwrap());
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad().unwrap().data(), &[2., 4.]);

        // Accumulates without zeroing.
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad().unwrap().data(), &[4., 8.]);

        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::vector(vec![1., 2.]).unwrap());
        let mut tape = Tape::new();
        let _ = tape.param(&store, w);
        let c = tape.constant(Tensor::scalar(3.0)).unwrap();
        tape.backward(c, &mut store).unwrap();
        assert_eq!(store.get(w).grad().unwrap().data(), &[0., 0.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1., 2.]).unwrap()).unwrap();
        assert!(matches!(tape.backward(x, &mut store), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1e308, 1e308]).unwrap()).unwrap();
        let two = tape.constant(Tensor::scalar(10.0)).unwrap();
        assert!(matches!(tape.mul(x, two), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn clear_frees_everything() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y, &mut store).unwrap();
        assert!(tape.grad(x).is_some());
        tape.clear();
        assert!(tape.is_empty());
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn unfold_pads_short_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(&[vec![1., 2.]])).unwrap();
        let u = tape.unfold(x, 3).unwrap();
        assert_eq!(tape.shape(u), &[1, 6]);
        assert_eq!(tape.value(u).data(), &[1., 2., 0., 0., 0., 0.]);
    }
}
