// SPDX-License-Identifier: Apache-2.0

//! Prototype emissions and the linear-chain CRF on top of them.
//!
//! Label states are `0..K`. The transition table is `(K+2) × (K+2)` with two
//! extra states, [`CrfParams::start`] at index `K` and [`CrfParams::stop`] at
//! `K+1`. Entries leading into START or out of STOP are stored but never read;
//! [`CrfParams::score`] reports them as `-inf`.
//!
//! Every function that takes an [`EmissionMatrix`] runs the chain over the
//! unmasked rows only, in order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{logsumexp_slice, CustomOp, Tape, Tensor, Var};

/// Class centroids in prototype space, one row per label index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub centroids: Tensor,
    pub counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }
}

fn class_counts(op: &'static str, labels: &[usize], n_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; n_classes];
    for &y in labels {
        if y >= n_classes {
            return Err(Error::invalid(op, format!("label {y} outside 0..{n_classes}")));
        }
        counts[y] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(op, format!("class {k} has no support vectors")));
    }
    Ok(counts)
}

fn segment_mean(reprs: &Tensor, labels: &[usize], counts: &[usize]) -> Tensor {
    let d = reprs.cols();
    let mut out = vec![0.0; counts.len() * d];
    for (row, &y) in reprs.data().chunks(d).zip(labels) {
        out[y * d..(y + 1) * d].iter_mut().zip(row).for_each(|(o, x)| *o += x);
    }
    for (k, &c) in counts.iter().enumerate() {
        out[k * d..(k + 1) * d].iter_mut().for_each(|o| *o /= c as f64);
    }
    Tensor::new(vec![counts.len(), d], out).expect("consistent shape")
}

/// Centroid `k` is the mean of the rows of `reprs` labeled `k`.
pub fn compute_prototypes(reprs: &Tensor, labels: &[usize], n_classes: usize) -> Result<PrototypeSet> {
    if reprs.shape().len() != 2 || reprs.rows() != labels.len() {
        return Err(Error::shape("compute_prototypes", reprs.shape(), &[labels.len()]));
    }
    let counts = class_counts("compute_prototypes", labels, n_classes)?;
    Ok(PrototypeSet {
        centroids: segment_mean(reprs, labels, &counts),
        counts,
    })
}

struct SegmentMeanOp {
    labels: Vec<usize>,
    counts: Vec<usize>,
}

impl CustomOp for SegmentMeanOp {
    fn name(&self) -> &'static str {
        "prototypes"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let d = inputs[0].cols();
        let mut g = vec![0.0; inputs[0].numel()];
        for (i, &y) in self.labels.iter().enumerate() {
            let scale = 1.0 / self.counts[y] as f64;
            g[i * d..(i + 1) * d]
                .iter_mut()
                .zip(&grad[y * d..(y + 1) * d])
                .for_each(|(gi, go)| *gi = go * scale);
        }
        vec![Some(g)]
    }
}

/// Differentiable [`compute_prototypes`]: returns the `[K × D]` centroid node
/// and the per-class counts.
pub fn prototypes_on_tape(tape: &mut Tape, reprs: Var, labels: &[usize], n_classes: usize) -> Result<(Var, Vec<usize>)> {
    let value = compute_prototypes(tape.value(reprs), labels, n_classes)?;
    let op = SegmentMeanOp {
        labels: labels.to_vec(),
        counts: value.counts.clone(),
    };
    let v = tape.custom(&[reprs], value.centroids, Box::new(op))?;
    Ok((v, value.counts))
}

/// Per-position label scores. Only rows with `mask[j]` take part in decoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionMatrix {
    pub scores: Tensor,
    pub mask: Vec<bool>,
}

impl EmissionMatrix {
    /// Every row unmasked.
    pub fn new(scores: Tensor) -> Result<Self> {
        if scores.shape().len() != 2 {
            return Err(Error::invalid("emissions", format!("expected [L × K], got {:?}", scores.shape())));
        }
        let mask = vec![true; scores.rows()];
        Ok(Self { scores, mask })
    }

    pub fn with_mask(scores: Tensor, mask: Vec<bool>) -> Result<Self> {
        let mut em = Self::new(scores)?;
        if mask.len() != em.scores.rows() {
            return Err(Error::shape("emissions", em.scores.shape(), &[mask.len()]));
        }
        em.mask = mask;
        Ok(em)
    }

    pub fn n_labels(&self) -> usize {
        self.scores.cols()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Unmasked rows packed together, `real_len × K`.
    fn packed(&self) -> Vec<f64> {
        self.scores
            .data()
            .chunks(self.n_labels())
            .zip(&self.mask)
            .filter(|(_, m)| **m)
            .flat_map(|(row, _)| row.iter().copied())
            .collect()
    }
}

fn neg_sq_dist(r: &Tensor, c: &Tensor) -> Result<Tensor> {
    if r.shape().len() != 2 || c.shape().len() != 2 || r.cols() != c.cols() {
        return Err(Error::shape("emissions", r.shape(), c.shape()));
    }
    let (l, k) = (r.rows(), c.rows());
    let mut out = Vec::with_capacity(l * k);
    for j in 0..l {
        let rj = r.row(j);
        for kk in 0..k {
            let dist: f64 = rj.iter().zip(c.row(kk)).map(|(a, b)| (a - b) * (a - b)).sum();
            out.push(-dist);
        }
    }
    Tensor::new(vec![l, k], out)
}

/// `scores[j][k] = −‖r_j − c_k‖²`.
pub fn emissions(query_reprs: &Tensor, protos: &PrototypeSet) -> Result<EmissionMatrix> {
    EmissionMatrix::new(neg_sq_dist(query_reprs, &protos.centroids)?)
}

struct NegSqDistOp;

impl CustomOp for NegSqDistOp {
    fn name(&self) -> &'static str {
        "emissions"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (r, c) = (inputs[0], inputs[1]);
        let (l, k, d) = (r.rows(), c.rows(), r.cols());
        let mut gr = vec![0.0; l * d];
        let mut gc = vec![0.0; k * d];
        for j in 0..l {
            for kk in 0..k {
                let g = grad[j * k + kk];
                if g == 0.0 {
                    continue;
                }
                for i in 0..d {
                    let diff = r.data()[j * d + i] - c.data()[kk * d + i];
                    gr[j * d + i] -= 2.0 * g * diff;
                    gc[kk * d + i] += 2.0 * g * diff;
                }
            }
        }
        vec![Some(gr), Some(gc)]
    }
}

/// Differentiable [`emissions`] from `[L × D]` queries and `[K × D]` centroids.
pub fn emissions_on_tape(tape: &mut Tape, query_reprs: Var, centroids: Var) -> Result<Var> {
    let value = neg_sq_dist(tape.value(query_reprs), tape.value(centroids))?;
    tape.custom(&[query_reprs, centroids], value, Box::new(NegSqDistOp))
}

/// Transition scores between labels plus the START and STOP boundary states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    n_labels: usize,
    transitions: Tensor,
}

impl CrfParams {
    pub fn zeros(n_labels: usize) -> Self {
        Self {
            n_labels,
            transitions: Tensor::zeros(&[n_labels + 2, n_labels + 2]),
        }
    }

    pub fn from_tensor(n_labels: usize, transitions: Tensor) -> Result<Self> {
        if transitions.shape() != [n_labels + 2, n_labels + 2] {
            return Err(Error::shape("crf", transitions.shape(), &[n_labels + 2, n_labels + 2]));
        }
        Ok(Self { n_labels, transitions })
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn start(&self) -> usize {
        self.n_labels
    }

    pub fn stop(&self) -> usize {
        self.n_labels + 1
    }

    pub fn transitions(&self) -> &Tensor {
        &self.transitions
    }

    pub fn transitions_mut(&mut self) -> &mut Tensor {
        &mut self.transitions
    }

    /// Score of moving `from → to`; `-inf` for moves into START or out of STOP.
    pub fn score(&self, from: usize, to: usize) -> f64 {
        if to == self.start() || from == self.stop() {
            f64::NEG_INFINITY
        } else {
            self.transitions.get2(from, to)
        }
    }

    fn check(&self, em: &EmissionMatrix) -> Result<()> {
        if em.n_labels() != self.n_labels {
            return Err(Error::shape("crf", em.scores.shape(), self.transitions.shape()));
        }
        Ok(())
    }
}

/// Chain view over packed rows: `em` is `l × k`, `trans` is `(k+2) × (k+2)`.
struct Chain<'a> {
    em: &'a [f64],
    trans: &'a [f64],
    l: usize,
    k: usize,
}

impl Chain<'_> {
    fn t(&self, from: usize, to: usize) -> f64 {
        self.trans[from * (self.k + 2) + to]
    }

    fn e(&self, pos: usize, label: usize) -> f64 {
        self.em[pos * self.k + label]
    }

    fn path_score(&self, path: &[usize]) -> f64 {
        let (start, stop) = (self.k, self.k + 1);
        let mut s = self.t(start, path[0]);
        for (j, &y) in path.iter().enumerate() {
            s += self.e(j, y);
            if j > 0 {
                s += self.t(path[j - 1], y);
            }
        }
        s + self.t(path[self.l - 1], stop)
    }

    /// Forward log-messages `alpha[t][k]` and `log Z`.
    fn forward(&self) -> (Vec<f64>, f64) {
        let (k, start, stop) = (self.k, self.k, self.k + 1);
        let mut alpha = vec![0.0; self.l * k];
        let mut buf = vec![0.0; k];
        for (y, a) in alpha[..k].iter_mut().enumerate() {
            *a = self.t(start, y) + self.e(0, y);
        }
        for pos in 1..self.l {
            for y in 0..k {
                for (x, b) in buf.iter_mut().enumerate() {
                    *b = alpha[(pos - 1) * k + x] + self.t(x, y);
                }
                alpha[pos * k + y] = self.e(pos, y) + logsumexp_slice(&buf);
            }
        }
        for (y, b) in buf.iter_mut().enumerate() {
            *b = alpha[(self.l - 1) * k + y] + self.t(y, stop);
        }
        (alpha, logsumexp_slice(&buf))
    }

    /// Backward log-messages `beta[t][k]`: log-sum over suffixes after `t`.
    fn backward(&self) -> Vec<f64> {
        let (k, stop) = (self.k, self.k + 1);
        let mut beta = vec![0.0; self.l * k];
        let mut buf = vec![0.0; k];
        for y in 0..k {
            beta[(self.l - 1) * k + y] = self.t(y, stop);
        }
        for pos in (0..self.l - 1).rev() {
            for x in 0..k {
                for (y, b) in buf.iter_mut().enumerate() {
                    *b = self.t(x, y) + self.e(pos + 1, y) + beta[(pos + 1) * k + y];
                }
                beta[pos * k + x] = logsumexp_slice(&buf);
            }
        }
        beta
    }

    /// Gradients of `log Z − score(gold)` w.r.t. the emissions and the transitions.
    fn nll_grads(&self, gold: &[usize], alpha: &[f64], log_z: f64) -> (Vec<f64>, Vec<f64>) {
        let (k, start, stop) = (self.k, self.k, self.k + 1);
        let n = k + 2;
        let beta = self.backward();
        let mut g_em = vec![0.0; self.l * k];
        let mut g_tr = vec![0.0; n * n];
        for pos in 0..self.l {
            for y in 0..k {
                let p = (alpha[pos * k + y] + beta[pos * k + y] - log_z).exp();
                g_em[pos * k + y] = p;
                if pos == 0 {
                    g_tr[start * n + y] += p;
                }
                if pos == self.l - 1 {
                    g_tr[y * n + stop] += p;
                }
            }
            if pos + 1 < self.l {
                for x in 0..k {
                    for y in 0..k {
                        let lp = alpha[pos * k + x] + self.t(x, y) + self.e(pos + 1, y) + beta[(pos + 1) * k + y] - log_z;
                        g_tr[x * n + y] += lp.exp();
                    }
                }
            }
        }
        for (pos, &y) in gold.iter().enumerate() {
            g_em[pos * k + y] -= 1.0;
            if pos > 0 {
                g_tr[gold[pos - 1] * n + y] -= 1.0;
            }
        }
        g_tr[start * n + gold[0]] -= 1.0;
        g_tr[gold[self.l - 1] * n + stop] -= 1.0;
        (g_em, g_tr)
    }

    /// Highest-scoring path; among equal scores the lexicographically smallest.
    fn viterbi(&self) -> Vec<usize> {
        let (k, start, stop) = (self.k, self.k, self.k + 1);
        // best[t][y]: best score of positions t.. given label y at t, STOP included.
        let mut best = vec![0.0; self.l * k];
        for y in 0..k {
            best[(self.l - 1) * k + y] = self.e(self.l - 1, y) + self.t(y, stop);
        }
        for pos in (0..self.l - 1).rev() {
            for x in 0..k {
                let m = (0..k)
                    .map(|y| self.t(x, y) + best[(pos + 1) * k + y])
                    .fold(f64::NEG_INFINITY, f64::max);
                best[pos * k + x] = self.e(pos, x) + m;
            }
        }
        let mut path = Vec::with_capacity(self.l);
        let mut prev = start;
        for pos in 0..self.l {
            let y = first_argmax((0..k).map(|y| self.t(prev, y) + best[pos * k + y]));
            path.push(y);
            prev = y;
        }
        path
    }
}

fn first_argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.enumerate() {
        if i == 0 || x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

fn check_gold(k: usize, l: usize, gold: &[usize]) -> Result<()> {
    if gold.len() != l {
        return Err(Error::invalid("crf", format!("gold has {} labels for {l} positions", gold.len())));
    }
    if let Some(&y) = gold.iter().find(|&&y| y >= k) {
        return Err(Error::invalid("crf", format!("gold label {y} outside 0..{k}")));
    }
    if l == 0 {
        return Err(Error::invalid("crf", "empty sequence"));
    }
    Ok(())
}

/// Emissions along `path` plus START, inner and STOP transitions.
pub fn path_score(em: &EmissionMatrix, crf: &CrfParams, path: &[usize]) -> Result<f64> {
    crf.check(em)?;
    let packed = em.packed();
    check_gold(crf.n_labels, em.real_len(), path)?;
    let chain = Chain {
        em: &packed,
        trans: crf.transitions.data(),
        l: path.len(),
        k: crf.n_labels,
    };
    Ok(chain.path_score(path))
}

/// `log Σ_paths exp(score)` by the forward algorithm.
pub fn log_partition(em: &EmissionMatrix, crf: &CrfParams) -> Result<f64> {
    crf.check(em)?;
    let packed = em.packed();
    let l = em.real_len();
    if l == 0 {
        return Err(Error::invalid("crf", "every row is masked"));
    }
    let chain = Chain {
        em: &packed,
        trans: crf.transitions.data(),
        l,
        k: crf.n_labels,
    };
    Ok(chain.forward().1)
}

/// `score(gold) − log Z`.
pub fn crf_log_likelihood(em: &EmissionMatrix, crf: &CrfParams, gold: &[usize]) -> Result<f64> {
    Ok(path_score(em, crf, gold)? - log_partition(em, crf)?)
}

/// Best label sequence over the unmasked rows, ties toward lower label indices
/// at the earliest differing position.
pub fn viterbi_decode(em: &EmissionMatrix, crf: &CrfParams) -> Result<Vec<usize>> {
    crf.check(em)?;
    let packed = em.packed();
    let l = em.real_len();
    if l == 0 {
        return Err(Error::invalid("viterbi", "every row is masked"));
    }
    let chain = Chain {
        em: &packed,
        trans: crf.transitions.data(),
        l,
        k: crf.n_labels,
    };
    Ok(chain.viterbi())
}

/// Row-wise argmax over the unmasked rows, ties toward the lower index.
pub fn predict_nocrf(em: &EmissionMatrix) -> Vec<usize> {
    em.scores
        .data()
        .chunks(em.n_labels().max(1))
        .zip(&em.mask)
        .filter(|(_, m)| **m)
        .map(|(row, _)| first_argmax(row.iter().copied()))
        .collect()
}

struct CrfNllOp {
    g_em: Vec<f64>,
    g_tr: Vec<f64>,
}

impl CustomOp for CrfNllOp {
    fn name(&self) -> &'static str {
        "crf_nll"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = grad[0];
        vec![
            Some(self.g_em.iter().map(|x| x * g).collect()),
            Some(self.g_tr.iter().map(|x| x * g).collect()),
        ]
    }
}

/// Negative log-likelihood `log Z − score(gold)` of one `[L × K]` emission
/// node under the `[(K+2) × (K+2)]` transition node, as a `[1]` scalar.
pub fn crf_nll_on_tape(tape: &mut Tape, em: Var, transitions: Var, gold: &[usize]) -> Result<Var> {
    let (e, tr) = (tape.value(em), tape.value(transitions));
    let (l, k) = match *e.shape() {
        [l, k] => (l, k),
        _ => return Err(Error::invalid("crf_nll", "emissions must be a matrix")),
    };
    if tr.shape() != [k + 2, k + 2] {
        return Err(Error::shape("crf_nll", e.shape(), tr.shape()));
    }
    check_gold(k, l, gold)?;
    let chain = Chain {
        em: e.data(),
        trans: tr.data(),
        l,
        k,
    };
    let (alpha, log_z) = chain.forward();
    let nll = log_z - chain.path_score(gold);
    let (g_em, g_tr) = chain.nll_grads(gold, &alpha, log_z);
    tape.custom(&[em, transitions], Tensor::scalar(nll), Box::new(CrfNllOp { g_em, g_tr }))
}

/// Summed per-position cross-entropy of the softmax over emission rows.
pub fn softmax_nll_on_tape(tape: &mut Tape, em: Var, gold: &[usize]) -> Result<Var> {
    let (l, k) = match *tape.shape(em) {
        [l, k] => (l, k),
        _ => return Err(Error::invalid("softmax_nll", "emissions must be a matrix")),
    };
    check_gold(k, l, gold)?;
    let lse = tape.logsumexp(em)?;
    let picked = tape.pick(em, gold)?;
    let per_pos = tape.sub(lse, picked)?;
    tape.sum(per_pos)
}
