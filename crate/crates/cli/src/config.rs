// SPDX-License-Identifier: Apache-2.0

//! Run configuration: a TOML file merged with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use protoseq::corpus::SynthSpec;
use protoseq::model::Variant;
use protoseq::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "PROTOSEQ_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Disjoint per-label lexicons, uniform transitions.
    Separable,
    /// Deterministic label cycle, two labels sharing most of their tokens.
    TransitionDominant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub kind: SynthKind,
    /// Label count of the separable corpus.
    pub labels: usize,
    /// Lexicon probability of the two ambiguous labels of the transition-dominant corpus.
    pub lambda: f64,
    /// Conversations in train, val and test.
    pub sizes: [usize; 3],
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            kind: SynthKind::Separable,
            labels: 3,
            lambda: 0.1,
            sizes: [500, 100, 100],
        }
    }
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Separable => "separable",
            SynthKind::TransitionDominant => "transition-dominant",
        }
    }
}

impl SynthOptions {
    pub fn spec(&self) -> SynthSpec {
        match self.kind {
            SynthKind::Separable => SynthSpec::separable(self.labels),
            SynthKind::TransitionDominant => SynthSpec::transition_dominant(self.lambda),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataPaths,
    pub train: TrainConfig,
    pub synth: SynthOptions,
}

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// TOML run configuration
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run seed (falls back to the config file, then to $PROTOSEQ_SEED, then 0)
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Model variant
    #[arg(long, value_name = "NAME", value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long, value_name = "PATH")]
    pub train: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub val: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub test: Option<PathBuf>,
    /// Word-vector text file (`token v1 ... vd` per line)
    #[arg(long, value_name = "PATH")]
    pub embeddings: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Episodes: per epoch for train, evaluated for eval, dumped for sample
    #[arg(long, value_name = "N")]
    pub episodes: Option<usize>,
    /// Classes per episode (defaults to the corpus label count)
    #[arg(long, value_name = "N")]
    pub ways: Option<usize>,
    /// Support conversations per class
    #[arg(long, value_name = "N")]
    pub shots: Option<usize>,
    /// Query conversations per class
    #[arg(long, value_name = "N")]
    pub queries: Option<usize>,
    /// Messages kept per conversation
    #[arg(long, value_name = "N")]
    pub max_len: Option<usize>,
    /// Labels left out of micro and weighted F1
    #[arg(long, value_name = "LABEL[,LABEL]", value_delimiter = ',')]
    pub exclude: Option<Vec<String>>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: protoseq::Error| e.to_string())
}

/// A merged configuration plus what the merge could not express in `RunConfig` itself.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub seed: u64,
    /// `n_ways` was given explicitly (file or flag) rather than left to the corpus.
    pub ways_explicit: bool,
}

impl Resolved {
    pub fn out_dir(&self) -> Option<&Path> {
        self.config.out.as_deref()
    }

    /// Sets `n_ways` to the corpus label count unless it was given explicitly.
    pub fn fit_ways(&mut self, n_labels: usize) {
        if !self.ways_explicit {
            self.config.train.episode.n_ways = n_labels;
        }
    }
}

fn resolve_relative(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

fn load_file(path: &Path) -> Result<(RunConfig, bool)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let raw: toml::Table = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
    let ways_explicit = raw
        .get("train")
        .and_then(|t| t.get("episode"))
        .and_then(|e| e.get("n_ways"))
        .is_some();
    let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [
        &mut cfg.data.train,
        &mut cfg.data.val,
        &mut cfg.data.test,
        &mut cfg.data.embeddings,
        &mut cfg.out,
    ] {
        resolve_relative(base, p);
    }
    Ok((cfg, ways_explicit))
}

/// Merges file, flags and environment. `env_seed` is the value of [`SEED_ENV`].
pub fn resolve(flags: &Overrides, env_seed: Option<&str>) -> Result<Resolved> {
    let (mut cfg, mut ways_explicit) = match &flags.config {
        Some(path) => load_file(path)?,
        None => (RunConfig::default(), false),
    };
    let seed = match (flags.seed, cfg.seed, env_seed) {
        (Some(s), _, _) | (None, Some(s), _) => s,
        (None, None, Some(raw)) => raw
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={raw:?} is not a non-negative integer"))?,
        (None, None, None) => 0,
    };
    cfg.seed = Some(seed);
    cfg.train.seed = seed;

    let set = |dst: &mut Option<PathBuf>, src: &Option<PathBuf>| {
        if let Some(p) = src {
            *dst = Some(p.clone());
        }
    };
    set(&mut cfg.data.train, &flags.train);
    set(&mut cfg.data.val, &flags.val);
    set(&mut cfg.data.test, &flags.test);
    set(&mut cfg.data.embeddings, &flags.embeddings);
    set(&mut cfg.out, &flags.out);
    for p in [
        &mut cfg.data.train,
        &mut cfg.data.val,
        &mut cfg.data.test,
        &mut cfg.data.embeddings,
        &mut cfg.out,
    ]
    .into_iter()
    .flatten()
    {
        *p = std::path::absolute(&*p).with_context(|| format!("resolving {}", p.display()))?;
    }

    if let Some(v) = flags.variant {
        cfg.train.model.variant = v;
    }
    let episode = &mut cfg.train.episode;
    if let Some(n) = flags.ways {
        episode.n_ways = n;
        ways_explicit = true;
    }
    if let Some(n) = flags.shots {
        episode.n_shots = n;
    }
    if let Some(n) = flags.queries {
        episode.n_queries = n;
    }
    if let Some(n) = flags.max_len {
        episode.max_len = n;
    }
    if let Some(ex) = &flags.exclude {
        cfg.train.excluded = ex.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    Ok(Resolved {
        config: cfg,
        seed,
        ways_explicit,
    })
}

/// The path stored under `data.<field>`, which must exist.
pub fn existing(path: &Option<PathBuf>, field: &str) -> Result<PathBuf> {
    let Some(p) = path else {
        bail!("data.{field} is required (set it in the config file or pass --{field})");
    };
    if !p.exists() {
        bail!("data.{field}: {} does not exist", p.display());
    }
    Ok(p.clone())
}
