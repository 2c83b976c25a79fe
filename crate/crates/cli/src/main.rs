// SPDX-License-Identifier: Apache-2.0

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, SynthKind};

/// Few-shot emotion sequence labeling with prototypical networks and a CRF.
#[derive(Parser, Debug)]
#[command(name = "protoseq", version)]
struct Cli {
    /// Worker threads for episode evaluation (default: all cores)
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes the model, history, test metrics and a manifest
    Train(Overrides),
    /// Evaluate a saved model on a test corpus
    Eval(EvalArgs),
    /// Compare episode-loss gradients against central differences
    Gradcheck(GradcheckArgs),
    /// Dump sampled episodes as jsonl
    Sample(SampleArgs),
    /// Write a synthetic train/val/test corpus
    Synth(SynthArgs),
    /// Render a saved metrics report, or an emotion/satisfaction correlation table
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Model file written by `train`
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Entries checked per parameter tensor (0 checks every entry)
    #[arg(long, value_name = "N", default_value_t = 20)]
    pub entries: usize,
    /// Maximum relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// Corpus to sample from
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitName,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Overrides,
    #[arg(long, value_enum)]
    pub kind: Option<SynthKind>,
    /// Label count (separable corpus)
    #[arg(long, value_name = "N")]
    pub labels: Option<usize>,
    /// Lexicon probability of the ambiguous labels (transition-dominant corpus)
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Conversations per split
    #[arg(long, value_name = "TRAIN,VAL,TEST", value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// metrics.json written by `train` or `eval`
    #[arg(value_name = "METRICS", required_unless_present = "satisfaction")]
    pub metrics: Option<PathBuf>,
    /// Corpus with per-conversation satisfaction scores
    #[arg(long, value_name = "PATH")]
    pub satisfaction: Option<PathBuf>,
    /// Only count emotions of this speaker
    #[arg(long, value_name = "NAME", requires = "satisfaction")]
    pub speaker: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads {n}: {e}");
            return ExitCode::FAILURE;
        }
    }
    let env_seed = std::env::var(config::SEED_ENV).ok();
    let env_seed = env_seed.as_deref();
    let result = match &cli.command {
        Command::Train(o) => commands::train(o, env_seed),
        Command::Eval(a) => commands::eval(a, env_seed),
        Command::Gradcheck(a) => commands::gradcheck(a, env_seed),
        Command::Sample(a) => commands::sample(a, env_seed),
        Command::Synth(a) => commands::synth(a, env_seed),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
