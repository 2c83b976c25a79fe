// SPDX-License-Identifier: Apache-2.0

//! Oracles and fixtures shared by the integration test targets.
//!
//! The CRF oracle enumerates all K^T label paths and scores each from the
//! raw transition table. The metrics oracle recounts TP/FP/FN position by
//! position, and computes MCC from the covariances of one-hot indicator
//! matrices, never through a confusion matrix.

#![allow(dead_code)]

use protoseq::corpus::{generate_splits, CorpusSplits, EmbeddingMatrix, SynthSpec, Vocab};
use protoseq::model::{ModelConfig, Variant};
use protoseq::numcore::Tensor;
use protoseq::protocrf::{CrfParams, EmissionMatrix};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Emissions `[t × k]` and a `(k+2) × (k+2)` transition table, all N(0, 1).
pub fn random_crf<R: Rng>(rng: &mut R, t: usize, k: usize) -> (EmissionMatrix, CrfParams) {
    let em = EmissionMatrix::new(normal_tensor(rng, &[t, k])).unwrap();
    let crf = CrfParams::from_tensor(k, normal_tensor(rng, &[k + 2, k + 2])).unwrap();
    (em, crf)
}

/// Every length-`t` path over `k` labels, in lexicographic order.
pub fn all_paths(t: usize, k: usize) -> Vec<Vec<usize>> {
    let total = k.pow(t as u32);
    (0..total)
        .map(|mut code| {
            let mut path = vec![0; t];
            for slot in path.iter_mut().rev() {
                *slot = code % k;
                code /= k;
            }
            path
        })
        .collect()
}

/// START → path → STOP score, read straight from the transition table.
pub fn brute_score(em: &EmissionMatrix, crf: &CrfParams, path: &[usize]) -> f64 {
    let k = crf.n_labels();
    let (start, stop) = (k, k + 1);
    let tr = crf.transitions();
    let mut s = tr.get2(start, path[0]) + tr.get2(*path.last().unwrap(), stop);
    for (j, &y) in path.iter().enumerate() {
        s += em.scores.get2(j, y);
        if j > 0 {
            s += tr.get2(path[j - 1], y);
        }
    }
    s
}

pub fn brute_log_partition(em: &EmissionMatrix, crf: &CrfParams) -> f64 {
    let scores: Vec<f64> = all_paths(em.real_len(), crf.n_labels())
        .iter()
        .map(|p| brute_score(em, crf, p))
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

/// Highest-scoring path; among equal scores the lexicographically smallest.
pub fn brute_viterbi(em: &EmissionMatrix, crf: &CrfParams) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in all_paths(em.real_len(), crf.n_labels()) {
        let s = brute_score(em, crf, &p);
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, p));
        }
    }
    best.unwrap().1
}

pub struct OracleF1 {
    /// `(precision, recall, f1, support)` per label over all positions.
    pub per_class: Vec<(f64, f64, f64, u64)>,
    pub micro: f64,
    pub weighted: f64,
}

fn safe_div(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Positions whose gold label is excluded are dropped; of the rest, a
/// prediction counts as a false positive only for a kept predicted label.
pub fn oracle_f1(pred: &[usize], gold: &[usize], n: usize, excluded: &[usize]) -> OracleF1 {
    let per_class = (0..n)
        .map(|k| {
            let tp = pred.iter().zip(gold).filter(|&(&p, &g)| p == k && g == k).count() as u64;
            let fp = pred.iter().zip(gold).filter(|&(&p, &g)| p == k && g != k).count() as u64;
            let fn_ = pred.iter().zip(gold).filter(|&(&p, &g)| p != k && g == k).count() as u64;
            let (p, r) = (safe_div(tp, tp + fp), safe_div(tp, tp + fn_));
            (p, r, f_measure(p, r), tp + fn_)
        })
        .collect();

    let kept = |l: usize| !excluded.contains(&l);
    let positions: Vec<(usize, usize)> = pred.iter().copied().zip(gold.iter().copied()).filter(|&(_, g)| kept(g)).collect();
    let tp = positions.iter().filter(|(p, g)| p == g).count() as u64;
    let fp = positions.iter().filter(|(p, g)| p != g && kept(*p)).count() as u64;
    let fn_ = positions.iter().filter(|(p, g)| p != g).count() as u64;
    let micro = f_measure(safe_div(tp, tp + fp), safe_div(tp, tp + fn_));

    let mut weighted = 0.0;
    let mut support = 0u64;
    for k in (0..n).filter(|&k| kept(k)) {
        let tp = positions.iter().filter(|&&(p, g)| p == k && g == k).count() as u64;
        let fp = positions.iter().filter(|&&(p, g)| p == k && g != k).count() as u64;
        let fn_ = positions.iter().filter(|&&(p, g)| g == k && p != k).count() as u64;
        let f = f_measure(safe_div(tp, tp + fp), safe_div(tp, tp + fn_));
        weighted += f * (tp + fn_) as f64;
        support += tp + fn_;
    }
    let weighted = if support == 0 { 0.0 } else { weighted / support as f64 };
    OracleF1 {
        per_class,
        micro,
        weighted,
    }
}

/// Gorodkin's R_K from its covariance form: `cov(X, Y) / sqrt(cov(X, X) cov(Y, Y))`
/// over the one-hot matrices of `pred` and `gold`, each column centred on its own mean.
pub fn oracle_mcc(pred: &[usize], gold: &[usize], n: usize) -> f64 {
    let m = pred.len() as f64;
    let column = |v: &[usize], k: usize| -> Vec<f64> {
        let col: Vec<f64> = v.iter().map(|&y| f64::from(u8::from(y == k))).collect();
        let mean = col.iter().sum::<f64>() / m;
        col.into_iter().map(|x| x - mean).collect()
    };
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for k in 0..n {
        let (x, y) = (column(pred, k), column(gold, k));
        sxy += x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
        sxx += x.iter().map(|a| a * a).sum::<f64>();
        syy += y.iter().map(|b| b * b).sum::<f64>();
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Small dimensions that keep finite-difference checks cheap.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        embed_dim: 6,
        cnn_widths: vec![2, 3],
        cnn_filters: 3,
        hidden: 4,
        mlp_hidden: 5,
        proto_dim: 4,
        dropout: 0.2,
        train_embeddings: variant == Variant::Proto,
    }
}

pub struct SynthSetup {
    pub splits: CorpusSplits,
    pub vocab: Vocab,
    pub embeddings: Tensor,
}

pub fn synth_setup(spec: &SynthSpec, sizes: [usize; 3], seed: u64, embed_dim: usize) -> SynthSetup {
    let splits = generate_splits(spec, sizes, seed).unwrap();
    let vocab = Vocab::build(splits.iter());
    let embeddings = EmbeddingMatrix::random(&vocab, embed_dim, seed).matrix;
    SynthSetup {
        splits,
        vocab,
        embeddings,
    }
}
