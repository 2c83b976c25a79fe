// SPDX-License-Identifier: Apache-2.0

//! Confusion-matrix metrics.
//!
//! Micro and weighted F1 honor an excluded-label set: positions whose gold
//! label is excluded are dropped, while a prediction of an excluded label on
//! kept gold still counts as a miss for the gold class. Per-class rows and MCC
//! always use every position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[gold][pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(n_labels: usize) -> Self {
        Self {
            counts: vec![vec![0; n_labels]; n_labels],
        }
    }

    pub fn from_labels(pred: &[usize], gold: &[usize], n_labels: usize) -> Result<Self> {
        let mut c = Self::new(n_labels);
        c.add(pred, gold)?;
        Ok(c)
    }

    pub fn add(&mut self, pred: &[usize], gold: &[usize]) -> Result<()> {
        if pred.len() != gold.len() {
            return Err(Error::invalid("metrics", format!("{} predictions for {} gold labels", pred.len(), gold.len())));
        }
        let n = self.n_labels();
        for (&p, &g) in pred.iter().zip(gold) {
            if p >= n || g >= n {
                return Err(Error::invalid("metrics", format!("label index outside 0..{n}")));
            }
            self.counts[g][p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            row.iter_mut().zip(orow).for_each(|(a, b)| *a += b);
        }
    }

    pub fn n_labels(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    /// Every label, no exclusions.
    pub per_class: Vec<ClassScores>,
    pub micro: f64,
    pub weighted: f64,
    /// No position had a kept gold label; `micro` and `weighted` are 0.
    pub undefined: bool,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn class_scores(tp: u64, fp: u64, fn_: u64) -> ClassScores {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    ClassScores {
        precision,
        recall,
        f1: harmonic(precision, recall),
        support: tp + fn_,
    }
}

impl Confusion {
    pub fn f1_scores(&self, excluded: &[usize]) -> F1Scores {
        let n = self.n_labels();
        let c = &self.counts;
        let kept: Vec<bool> = (0..n).map(|k| !excluded.contains(&k)).collect();
        let row_sum = |g: usize| c[g].iter().sum::<u64>();

        let per_class = (0..n)
            .map(|k| {
                let tp = c[k][k];
                let fp = (0..n).map(|g| c[g][k]).sum::<u64>() - tp;
                class_scores(tp, fp, row_sum(k) - tp)
            })
            .collect();

        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        let mut weighted = 0.0;
        let mut support = 0;
        for k in (0..n).filter(|&k| kept[k]) {
            let tp_k = c[k][k];
            let fp_k = (0..n).filter(|&g| kept[g] && g != k).map(|g| c[g][k]).sum::<u64>();
            let fn_k = row_sum(k) - tp_k;
            tp += tp_k;
            fp += fp_k;
            fn_ += fn_k;
            let s = class_scores(tp_k, fp_k, fn_k);
            weighted += s.f1 * s.support as f64;
            support += s.support;
        }
        let undefined = support == 0;
        F1Scores {
            per_class,
            micro: harmonic(ratio(tp, tp + fp), ratio(tp, tp + fn_)),
            weighted: if undefined { 0.0 } else { weighted / support as f64 },
            undefined,
        }
    }

    /// Gorodkin's multi-class Matthews correlation; 0 when a denominator factor vanishes.
    pub fn mcc(&self) -> f64 {
        let n = self.n_labels();
        let c = &self.counts;
        let s = self.total() as f64;
        let correct: f64 = (0..n).map(|k| c[k][k] as f64).sum();
        let t: Vec<f64> = (0..n).map(|k| c[k].iter().sum::<u64>() as f64).collect();
        let p: Vec<f64> = (0..n).map(|k| (0..n).map(|g| c[g][k]).sum::<u64>() as f64).collect();
        let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
        let pp: f64 = p.iter().map(|a| a * a).sum();
        let tt: f64 = t.iter().map(|a| a * a).sum();
        let (dp, dt) = (s * s - pp, s * s - tt);
        if dp == 0.0 || dt == 0.0 {
            return 0.0;
        }
        ((correct * s - pt) / (dp.sqrt() * dt.sqrt())).clamp(-1.0, 1.0)
    }
}

pub fn f1_scores(pred: &[usize], gold: &[usize], n_labels: usize, excluded: &[usize]) -> Result<F1Scores> {
    Ok(Confusion::from_labels(pred, gold, n_labels)?.f1_scores(excluded))
}

pub fn mcc(pred: &[usize], gold: &[usize], n_labels: usize) -> Result<f64> {
    Ok(Confusion::from_labels(pred, gold, n_labels)?.mcc())
}

/// Mean, population standard deviation and variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    pub variance: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let variance = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: variance.sqrt(),
            variance,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScores {
    pub f1_micro: f64,
    pub f1_weighted: f64,
    pub mcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledClassScores {
    pub label: String,
    #[serde(flatten)]
    pub scores: ClassScores,
}

/// Pooled scores over every evaluated episode plus their per-episode spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub labels: Vec<String>,
    pub excluded: Vec<String>,
    pub episodes: usize,
    pub per_class: Vec<LabeledClassScores>,
    pub f1_micro: f64,
    pub f1_weighted: f64,
    pub mcc: f64,
    pub undefined: bool,
    pub per_episode: Vec<EpisodeScores>,
    pub f1_micro_spread: Spread,
    pub f1_weighted_spread: Spread,
    pub mcc_spread: Spread,
    pub confusion: Confusion,
}

impl MetricsReport {
    /// `per_episode[i]` must come from episode `i`; `pooled` is their sum.
    pub fn from_episodes(labels: &[String], excluded: &[usize], episodes: &[Confusion]) -> Self {
        let mut pooled = Confusion::new(labels.len());
        let per_episode: Vec<EpisodeScores> = episodes
            .iter()
            .map(|c| {
                pooled.merge(c);
                let f = c.f1_scores(excluded);
                EpisodeScores {
                    f1_micro: f.micro,
                    f1_weighted: f.weighted,
                    mcc: c.mcc(),
                }
            })
            .collect();
        let f = pooled.f1_scores(excluded);
        let spread = |get: fn(&EpisodeScores) -> f64| Spread::of(&per_episode.iter().map(get).collect::<Vec<_>>());
        Self {
            labels: labels.to_vec(),
            excluded: excluded.iter().map(|&k| labels[k].clone()).collect(),
            episodes: episodes.len(),
            per_class: labels
                .iter()
                .zip(f.per_class)
                .map(|(l, scores)| LabeledClassScores {
                    label: l.clone(),
                    scores,
                })
                .collect(),
            f1_micro: f.micro,
            f1_weighted: f.weighted,
            mcc: pooled.mcc(),
            undefined: f.undefined,
            f1_micro_spread: spread(|e| e.f1_micro),
            f1_weighted_spread: spread(|e| e.f1_weighted),
            mcc_spread: spread(|e| e.mcc),
            per_episode,
            confusion: pooled,
        }
    }

    /// Plain-text tables: headline scores, then one row per class.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let excluded = if self.excluded.is_empty() {
            "none".to_string()
        } else {
            self.excluded.join(", ")
        };
        out.push_str(&format!("episodes: {}    excluded from F1: {excluded}\n\n", self.episodes));
        out.push_str(&format!("{:<14}{:>10}{:>10}{:>12}\n", "metric", "pooled", "mean", "± std"));
        for (name, pooled, s) in [
            ("F1 (weighted)", self.f1_weighted, self.f1_weighted_spread),
            ("MCC", self.mcc, self.mcc_spread),
            ("F1 (micro)", self.f1_micro, self.f1_micro_spread),
        ] {
            out.push_str(&format!("{name:<14}{pooled:>10.4}{:>10.4}{:>12.4}\n", s.mean, s.std));
        }
        if self.undefined {
            out.push_str("note: no kept gold labels; F1 scores reported as 0\n");
        }
        let width = self.labels.iter().map(String::len).max().unwrap_or(5).max(5) + 2;
        out.push_str(&format!(
            "\n{:<width$}{:>11}{:>9}{:>10}{:>9}\n",
            "label", "precision", "recall", "f1-score", "support"
        ));
        for c in &self.per_class {
            out.push_str(&format!(
                "{:<width$}{:>11.4}{:>9.4}{:>10.4}{:>9}\n",
                c.label, c.scores.precision, c.scores.recall, c.scores.f1, c.scores.support
            ));
        }
        out
    }
}
