// SPDX-License-Identifier: Apache-2.0

//! Episodic training with early stopping, and episode-based evaluation.
//!
//! Every random draw comes from a ChaCha8 stream derived from the run seed:
//! initialization, training episodes, dropout, validation episodes and test
//! episodes each have their own. Validation replays the same episodes after
//! every epoch. Evaluation episode `i` is drawn from its own seed, so reports
//! do not depend on the number of threads.

pub mod correlation;
pub mod metrics;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_corpus, Corpus, CorpusSplits, EncodedConversation, Vocab};
use crate::episodes::{EpisodeSampler, EpisodeSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numcore::{Adam, Tape, Tensor};

pub use correlation::{emotion_satisfaction_correlation, pearson, Correlation, CorrelationTable};
pub use metrics::{f1_scores, mcc, ClassScores, Confusion, EpisodeScores, F1Scores, MetricsReport, Spread};

pub const STREAM_INIT: u64 = 1;
pub const STREAM_TRAIN: u64 = 2;
pub const STREAM_DROPOUT: u64 = 3;
pub const STREAM_VAL: u64 = 4;
pub const STREAM_TEST: u64 = 5;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, stream, index)`.
pub fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ splitmix(stream)) ^ index))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes_per_epoch: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
    pub max_epochs: usize,
    /// Epochs without a strict validation F1-micro improvement before stopping.
    pub patience: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub episode: EpisodeSpec,
    /// Labels left out of micro and weighted F1.
    pub excluded: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes_per_epoch: 100,
            val_episodes: 100,
            test_episodes: 1000,
            max_epochs: 1000,
            patience: 100,
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            model: ModelConfig::default(),
            episode: EpisodeSpec::default(),
            excluded: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("val_episodes", self.val_episodes),
            ("test_episodes", self.test_episodes),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("train.{name} must be positive")));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "train.patience ({}) exceeds train.max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        let (b1, b2) = self.betas;
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || self.eps <= 0.0 {
            return Err(Error::Config("train.lr, train.betas or train.eps out of range".into()));
        }
        self.model.validate()?;
        self.episode.validate()
    }
}

/// Indices of `names` in `labels`; unknown names are an error.
pub fn label_indices(labels: &[String], names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            labels
                .iter()
                .position(|l| l == n)
                .ok_or_else(|| Error::Config(format!("excluded label `{n}` is not in the label set {labels:?}")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1_micro: f64,
    pub best: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1_micro: f64,
    pub stopped_early: bool,
}

impl History {
    /// One tab-separated line per epoch: epoch, train loss, validation F1-micro, best flag.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_f1_micro\tbest\n");
        for e in &self.epochs {
            out.push_str(&format!("{}\t{:.6}\t{:.6}\t{}\n", e.epoch, e.train_loss, e.val_f1_micro, u8::from(e.best)));
        }
        out
    }
}

/// A split reduced to indices, with its episode sampler.
pub struct EncodedSplit {
    pub conversations: Vec<EncodedConversation>,
    pub sampler: EpisodeSampler,
}

impl EncodedSplit {
    pub fn new(corpus: &Corpus, labels: &[String], vocab: &Vocab, spec: EpisodeSpec) -> Result<Self> {
        if corpus.label_set() != labels {
            return Err(Error::Config(format!(
                "{} split labels {:?} differ from the model labels {labels:?}",
                corpus.split.as_str(),
                corpus.label_set()
            )));
        }
        let conversations = encode_corpus(corpus, vocab, spec.max_len);
        let sampler = EpisodeSampler::new(&conversations, labels, spec)?;
        Ok(Self { conversations, sampler })
    }

    pub fn check_feasible(&self) -> Result<()> {
        self.sampler.check_feasible()
    }
}

/// Decodes `n_episodes` episodes (episode `i` drawn from `(seed, stream, i)`)
/// and pools the confusion counts.
pub fn evaluate_split(
    model: &Model,
    split: &EncodedSplit,
    n_episodes: usize,
    excluded: &[usize],
    seed: u64,
    stream: u64,
) -> Result<MetricsReport> {
    let n = model.labels.len();
    let per_episode = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(seed, stream, i as u64);
            let episode = split.sampler.sample(&mut rng)?;
            let mut c = Confusion::new(n);
            for q in model.predict_episode(&split.conversations, &episode)? {
                c.add(&q.pred, &q.gold)?;
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_episodes(&model.labels, excluded, &per_episode))
}

/// Test-protocol evaluation of `model` on `corpus`.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    spec: EpisodeSpec,
    n_episodes: usize,
    excluded: &[String],
    seed: u64,
) -> Result<MetricsReport> {
    let split = EncodedSplit::new(corpus, &model.labels, &model.vocab, spec)?;
    split.check_feasible()?;
    let excluded = label_indices(&model.labels, excluded)?;
    evaluate_split(model, &split, n_episodes, &excluded, seed, STREAM_TEST)
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: History,
}

/// Trains `config.model` on `splits.train`, selecting the epoch with the best
/// pooled validation F1-micro. The returned model carries those weights.
///
/// A variant without trainable parameters is validated once and returned.
pub fn train(config: &TrainConfig, splits: &CorpusSplits, vocab: &Vocab, embeddings: &Tensor) -> Result<TrainOutcome> {
    config.validate()?;
    let labels = splits.label_set().to_vec();
    if config.episode.n_ways != labels.len() {
        return Err(Error::Config(format!(
            "episode.n_ways = {} but the corpus has {} labels",
            config.episode.n_ways,
            labels.len()
        )));
    }
    let excluded = label_indices(&labels, &config.excluded)?;
    let train = EncodedSplit::new(&splits.train, &labels, vocab, config.episode)?;
    let val = EncodedSplit::new(&splits.val, &labels, vocab, config.episode)?;
    let test = EncodedSplit::new(&splits.test, &labels, vocab, config.episode)?;
    for split in [&train, &val, &test] {
        split.check_feasible()?;
    }

    let mut init_rng = derived_rng(config.seed, STREAM_INIT, 0);
    let mut model = Model::new(config.model.clone(), labels, vocab.clone(), embeddings.clone(), &mut init_rng)?;
    let adam = Adam::new(config.lr, config.betas, config.eps);
    let mut sample_rng = derived_rng(config.seed, STREAM_TRAIN, 0);
    let mut dropout_rng = derived_rng(config.seed, STREAM_DROPOUT, 0);

    let mut history = History::default();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let trainable = !model.store.is_empty();
    let mut tape = Tape::new();

    for epoch in 1..=config.max_epochs {
        let mut loss_sum = 0.0;
        for _ in 0..config.episodes_per_epoch {
            let episode = train.sampler.sample(&mut sample_rng)?;
            tape.clear();
            let rng: &mut dyn RngCore = &mut dropout_rng;
            let loss = model.episode_loss(&mut tape, &train.conversations, &episode, Some(rng))?;
            loss_sum += tape.value(loss).item();
            if trainable {
                tape.backward(loss, &mut model.store)?;
                adam.step(&mut model.store)?;
            }
        }
        let train_loss = loss_sum / config.episodes_per_epoch as f64;
        let val_f1 = evaluate_split(&model, &val, config.val_episodes, &excluded, config.seed, STREAM_VAL)?.f1_micro;
        let improved = best.as_ref().is_none_or(|(b, _)| val_f1 > *b);
        if improved {
            best = Some((val_f1, model.store.snapshot()));
            history.best_epoch = epoch;
            history.best_val_f1_micro = val_f1;
            since_best = 0;
        } else {
            since_best += 1;
        }
        log::info!("epoch {epoch}: train loss {train_loss:.4}, val F1-micro {val_f1:.4}{}", if improved { " *" } else { "" });
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_f1_micro: val_f1,
            best: improved,
        });
        if !trainable {
            break;
        }
        if since_best >= config.patience {
            history.stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    if let Some((_, snapshot)) = best {
        model.store.restore(&snapshot);
    }
    Ok(TrainOutcome { model, history })
}

/// Test-split evaluation with the settings of `config`.
pub fn evaluate_test(model: &Model, config: &TrainConfig, test: &Corpus) -> Result<MetricsReport> {
    evaluate(model, test, config.episode, config.test_episodes, &config.excluded, config.seed)
}
