// SPDX-License-Identifier: Apache-2.0

//! Markov-chain conversation generator for desk-scale experiments.
//!
//! Labels follow a first-order chain. Each token of a message with label `k`
//! comes from `k`'s own lexicon with probability `lambda[k]` and from a
//! shared confuser lexicon otherwise, so `lambda` dials how much the text
//! alone reveals the label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Conversation, Corpus, Message, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub labels: Vec<String>,
    /// Distribution of the first label. Uniform when absent.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    /// Row-stochastic `transitions[from][to]`.
    pub transitions: Vec<Vec<f64>>,
    pub lexicons: Vec<Vec<String>>,
    pub confusers: Vec<String>,
    /// Per-label probability of drawing a token from the label's lexicon.
    pub lambda: Vec<f64>,
    /// Inclusive range of messages per conversation.
    pub length: (usize, usize),
    /// Inclusive range of tokens per message.
    pub tokens_per_message: (usize, usize),
    pub speakers: Vec<String>,
}

fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

impl SynthSpec {
    /// `n_labels` labels with disjoint lexicons, λ = 1 and uniform transitions:
    /// every message's label is readable from any of its tokens.
    pub fn separable(n_labels: usize) -> Self {
        let labels: Vec<String> = (0..n_labels).map(|k| format!("label{k}")).collect();
        let uniform = vec![1.0 / n_labels as f64; n_labels];
        Self {
            lexicons: labels.iter().map(|l| words(&format!("{l}w"), 8)).collect(),
            transitions: vec![uniform; n_labels],
            labels,
            initial: None,
            confusers: words("filler", 20),
            lambda: vec![1.0; n_labels],
            length: (4, 10),
            tokens_per_message: (3, 8),
            speakers: vec!["agent".into(), "visitor".into()],
        }
    }

    /// Three labels on the deterministic cycle `cue → amb_a → amb_b → cue`.
    /// `cue` is fully readable from its tokens; `amb_a` and `amb_b` draw only
    /// a fraction `lambda` of their tokens from their own lexicons, so telling
    /// them apart mostly requires knowing where they sit in the cycle.
    pub fn transition_dominant(lambda: f64) -> Self {
        let labels: Vec<String> = ["amb_a", "amb_b", "cue"].map(String::from).to_vec();
        Self {
            lexicons: labels.iter().map(|l| words(&format!("{l}w"), 8)).collect(),
            labels,
            initial: None,
            transitions: vec![
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![1.0, 0.0, 0.0],
            ],
            confusers: words("filler", 20),
            lambda: vec![lambda, lambda, 1.0],
            length: (4, 10),
            tokens_per_message: (3, 8),
            speakers: vec!["agent".into(), "visitor".into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.labels.len();
        let bad = |msg: String| Err(Error::Synth(msg));
        if k == 0 {
            return bad("no labels".into());
        }
        if self.transitions.len() != k || self.lexicons.len() != k || self.lambda.len() != k {
            return bad(format!("transitions, lexicons and lambda must each have {k} entries"));
        }
        let stochastic = |row: &[f64]| {
            row.len() == k && row.iter().all(|p| p.is_finite() && *p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-9
        };
        if let Some(init) = &self.initial {
            if !stochastic(init) {
                return bad("initial distribution is not stochastic".into());
            }
        }
        if let Some(r) = self.transitions.iter().position(|row| !stochastic(row)) {
            return bad(format!("transition row {r} ({}) is not stochastic", self.labels[r]));
        }
        for (i, (&lam, lex)) in self.lambda.iter().zip(&self.lexicons).enumerate() {
            if !(0.0..=1.0).contains(&lam) {
                return bad(format!("lambda for {} outside [0, 1]", self.labels[i]));
            }
            if lam > 0.0 && lex.is_empty() {
                return bad(format!("empty lexicon for {}", self.labels[i]));
            }
            if lam < 1.0 && self.confusers.is_empty() {
                return bad("empty confuser lexicon".into());
            }
        }
        let (lo, hi) = self.length;
        let (tlo, thi) = self.tokens_per_message;
        if lo == 0 || lo > hi || tlo == 0 || tlo > thi {
            return bad("length ranges must be nonempty and positive".into());
        }
        if self.speakers.is_empty() {
            return bad("no speakers".into());
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` above the cumulative sum; take the last reachable state.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Generates `n` conversations with ids `{prefix}{index:05}`.
pub fn generate_synthetic(spec: &SynthSpec, n: usize, prefix: &str, split: Split, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let k = spec.labels.len();
    let uniform = vec![1.0 / k as f64; k];
    let initial = spec.initial.as_deref().unwrap_or(&uniform);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut conversations = Vec::with_capacity(n);
    for i in 0..n {
        let len = rng.random_range(spec.length.0..=spec.length.1);
        let mut label = draw(&mut rng, initial);
        let mut messages = Vec::with_capacity(len);
        for j in 0..len {
            if j > 0 {
                label = draw(&mut rng, &spec.transitions[label]);
            }
            let n_tokens = rng.random_range(spec.tokens_per_message.0..=spec.tokens_per_message.1);
            let tokens: Vec<String> = (0..n_tokens)
                .map(|_| {
                    let lex = if rng.random::<f64>() < spec.lambda[label] {
                        &spec.lexicons[label]
                    } else {
                        &spec.confusers
                    };
                    lex[rng.random_range(0..lex.len())].clone()
                })
                .collect();
            messages.push(Message {
                speaker: spec.speakers[j % spec.speakers.len()].clone(),
                text: tokens.join(" "),
                tokens,
                label: spec.labels[label].clone(),
            });
        }
        conversations.push(Conversation {
            id: format!("{prefix}{i:05}"),
            messages,
            meta: None,
        });
    }
    let mut corpus = Corpus::new(split, conversations)?;
    corpus.set_label_set(spec.labels.clone())?;
    Ok(corpus)
}

/// Train/val/test corpora from one seed; split `s` uses an independent stream.
pub fn generate_splits(spec: &SynthSpec, sizes: [usize; 3], seed: u64) -> Result<super::CorpusSplits> {
    let mk = |split: Split, idx: u64, n: usize| {
        generate_synthetic(spec, n, &format!("{}-", split.as_str()), split, seed.wrapping_add(idx.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
    };
    super::CorpusSplits::new(
        mk(Split::Train, 0, sizes[0])?,
        mk(Split::Val, 1, sizes[1])?,
        mk(Split::Test, 2, sizes[2])?,
    )
}
