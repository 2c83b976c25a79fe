// SPDX-License-Identifier: Apache-2.0

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use protoseq::checkpoint::{load_checkpoint, save_checkpoint};
use protoseq::corpus::{
    encode_corpus, generate_splits, generate_synthetic, load_corpus, load_embeddings, write_jsonl, Corpus, CorpusSplits,
    EmbeddingMatrix, Split, Vocab,
};
use protoseq::episodes::EpisodeSampler;
use protoseq::model::{Model, Variant};
use protoseq::numcore::{grad_check, GradCheckConfig, Tensor};
use protoseq::trainer::{
    derived_rng, emotion_satisfaction_correlation, evaluate, evaluate_test, train as run_training, MetricsReport,
    STREAM_DROPOUT, STREAM_INIT, STREAM_TRAIN,
};
use serde::Serialize;

use crate::config::{existing, resolve, Overrides, Resolved, RunConfig};
use crate::manifest::Manifest;
use crate::{EvalArgs, GradcheckArgs, ReportArgs, SampleArgs, SplitName, SynthArgs};

fn out_dir(r: &Resolved) -> Result<PathBuf> {
    let dir = r.out_dir().context("an output directory is required (--out DIR or `out` in the config file)")?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.to_path_buf())
}

fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>, manifest: &mut Manifest) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    manifest.output(name);
    Ok(())
}

fn to_json(value: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn embedding_table(cfg: &RunConfig, vocab: &Vocab, seed: u64, manifest: &mut Manifest) -> Result<Tensor> {
    let dim = cfg.train.model.embed_dim;
    let Some(path) = &cfg.data.embeddings else {
        log::info!("no embedding file; using seeded random {dim}-dimensional vectors");
        return Ok(EmbeddingMatrix::random(vocab, dim, seed).matrix);
    };
    let path = existing(&Some(path.clone()), "embeddings")?;
    let emb = load_embeddings(&path, vocab, dim, seed)?;
    log::info!(
        "{}: vectors for {} of {} vocabulary entries, {} malformed lines skipped",
        path.display(),
        emb.found,
        vocab.len(),
        emb.skipped_lines
    );
    manifest.input("embeddings", &path)?;
    Ok(emb.matrix)
}

fn load_split(cfg: &RunConfig, split: Split, manifest: &mut Manifest) -> Result<Corpus> {
    let (field, path) = match split {
        Split::Train => ("train", &cfg.data.train),
        Split::Val => ("val", &cfg.data.val),
        Split::Test => ("test", &cfg.data.test),
    };
    let path = existing(path, field)?;
    let corpus = load_corpus(&path, split)?;
    manifest.input(field, &path)?;
    Ok(corpus)
}

pub fn train(flags: &Overrides, env_seed: Option<&str>) -> Result<()> {
    let mut r = resolve(flags, env_seed)?;
    if let Some(n) = flags.episodes {
        r.config.train.episodes_per_epoch = n;
    }
    r.out_dir().context("an output directory is required (--out DIR or `out` in the config file)")?;
    let mut manifest = Manifest::new("train", r.seed, &r.config);
    let splits = CorpusSplits::new(
        load_split(&r.config, Split::Train, &mut manifest)?,
        load_split(&r.config, Split::Val, &mut manifest)?,
        load_split(&r.config, Split::Test, &mut manifest)?,
    )?;
    r.fit_ways(splits.label_set().len());
    r.config.train.excluded = splits.train.exclusion_list(&r.config.train.excluded);
    r.config.train.validate()?;
    let vocab = Vocab::build(splits.iter());
    let embeddings = embedding_table(&r.config, &vocab, r.seed, &mut manifest)?;
    log::info!(
        "{} labels, vocabulary of {}, {} / {} / {} conversations",
        splits.label_set().len(),
        vocab.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );

    let outcome = run_training(&r.config.train, &splits, &vocab, &embeddings)?;
    let report = evaluate_test(&outcome.model, &r.config.train, &splits.test)?;

    let dir = out_dir(&r)?;
    manifest.config = r.config.clone();
    save_checkpoint(&outcome.model, &dir.join("model.ckpt"))?;
    manifest.output("model.ckpt");
    write_file(&dir, "history.tsv", outcome.history.to_tsv(), &mut manifest)?;
    write_file(&dir, "history.json", to_json(&outcome.history)?, &mut manifest)?;
    write_file(&dir, "metrics.json", to_json(&report)?, &mut manifest)?;
    let rendered = report.render();
    write_file(&dir, "report.txt", &rendered, &mut manifest)?;
    manifest.write(&dir)?;
    println!(
        "best epoch {} of {} (validation F1-micro {:.4})\n",
        outcome.history.best_epoch,
        outcome.history.epochs.len(),
        outcome.history.best_val_f1_micro
    );
    print!("{rendered}");
    Ok(())
}

pub fn eval(args: &EvalArgs, env_seed: Option<&str>) -> Result<()> {
    let mut r = resolve(&args.common, env_seed)?;
    if let Some(n) = args.common.episodes {
        r.config.train.test_episodes = n;
    }
    let expected = args.common.config.as_ref().map(|_| r.config.train.model.clone());
    let model = load_checkpoint(&args.model, expected.as_ref())
        .with_context(|| format!("loading {}", args.model.display()))?;
    if let Some(v) = args.common.variant {
        ensure!(
            v == model.variant(),
            "--variant {v} does not match the saved model's variant {}",
            model.variant()
        );
    }
    r.config.train.model = model.network.config().clone();
    let mut manifest = Manifest::new("eval", r.seed, &r.config);
    manifest.input("model", &args.model)?;
    let mut test = load_split(&r.config, Split::Test, &mut manifest)?;
    test.set_label_set(model.labels.clone())
        .context("the test corpus uses labels the model was not trained on")?;
    r.fit_ways(model.labels.len());
    r.config.train.excluded = test.exclusion_list(&r.config.train.excluded);
    let t = &r.config.train;
    ensure!(t.test_episodes > 0, "train.test_episodes must be positive");
    let report = evaluate(&model, &test, t.episode, t.test_episodes, &t.excluded, r.seed)?;
    let rendered = report.render();
    if r.out_dir().is_some() {
        let dir = out_dir(&r)?;
        manifest.config = r.config.clone();
        write_file(&dir, "metrics.json", to_json(&report)?, &mut manifest)?;
        write_file(&dir, "report.txt", &rendered, &mut manifest)?;
        manifest.write(&dir)?;
    }
    print!("{rendered}");
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs, env_seed: Option<&str>) -> Result<()> {
    ensure!(args.tol > 0.0 && args.step > 0.0, "--tol and --step must be positive");
    let mut r = resolve(&args.common, env_seed)?;
    let seed = r.seed;
    let mut manifest = Manifest::new("gradcheck", seed, &r.config);
    let corpus = if r.config.data.train.is_some() {
        load_split(&r.config, Split::Train, &mut manifest)?
    } else {
        let synth = &r.config.synth;
        log::info!("no --train corpus; using a synthetic {} corpus", synth.kind.name());
        generate_synthetic(&synth.spec(), synth.sizes[0], "train-", Split::Train, seed)?
    };
    r.fit_ways(corpus.label_set().len());
    let spec = r.config.train.episode;
    spec.validate()?;
    let vocab = Vocab::build([&corpus]);
    let embeddings = embedding_table(&r.config, &vocab, seed, &mut manifest)?;
    let mut model_cfg = r.config.train.model.clone();
    if model_cfg.variant == Variant::Proto && !model_cfg.train_embeddings {
        log::info!("proto has no trainable parameters; checking gradients with respect to the embedding table");
        model_cfg.train_embeddings = true;
    }
    model_cfg.validate()?;
    let mut init = derived_rng(seed, STREAM_INIT, 0);
    let mut model = Model::new(model_cfg, corpus.label_set().to_vec(), vocab, embeddings, &mut init)?;
    let convs = encode_corpus(&corpus, &model.vocab, spec.max_len);
    let sampler = EpisodeSampler::new(&convs, &model.labels, spec)?;
    sampler.check_feasible()?;
    let episode = sampler.sample(&mut derived_rng(seed, STREAM_TRAIN, 0))?;

    let cfg = GradCheckConfig {
        h: args.step,
        tol: args.tol,
        max_entries_per_param: (args.entries > 0).then_some(args.entries),
        seed,
        ..GradCheckConfig::default()
    };
    let net = &model.network;
    let report = grad_check(
        &mut model.store,
        |store, tape| {
            let mut dropout = derived_rng(seed, STREAM_DROPOUT, 0);
            net.episode_loss(tape, store, &convs, &episode, Some(&mut dropout))
        },
        &cfg,
    )?;

    let width = report.per_param.iter().map(|p| p.param.len()).max().unwrap_or(9).max(9) + 2;
    let mut text = format!("{:<width$}{:>9}{:>14}\n", "parameter", "checked", "max rel err");
    for p in &report.per_param {
        text.push_str(&format!("{:<width$}{:>9}{:>14.3e}\n", p.param, p.checked, p.max_rel_err));
    }
    text.push_str(&format!(
        "\nvariant {}: {} entries checked, {} skipped at kinks, max rel err {:.3e} (tol {:.0e}, h {:.0e}, floor {:.1e})\n",
        net.variant(),
        report.checked,
        report.skipped_kinks,
        report.max_rel_err,
        report.tol,
        cfg.h,
        report.floor
    ));
    if r.out_dir().is_some() {
        let dir = out_dir(&r)?;
        write_file(&dir, "gradcheck.json", to_json(&report)?, &mut manifest)?;
        manifest.write(&dir)?;
    }
    print!("{text}");
    ensure!(report.checked > 0, "no gradient entries were checked");
    if !report.passed() {
        let worst = report
            .failures
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            .expect("failures present");
        bail!(
            "{} of {} entries exceed tol {:.0e}; worst {}[{}]: analytic {:.6e}, numeric {:.6e}",
            report.failures.len(),
            report.checked,
            report.tol,
            worst.param,
            worst.index,
            worst.analytic,
            worst.numeric
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EpisodeLine<'a> {
    episode: usize,
    role: &'static str,
    label: &'a str,
    /// Messages that fall within `max_len`.
    kept: usize,
    conversation: &'a protoseq::corpus::Conversation,
}

pub fn sample(args: &SampleArgs, env_seed: Option<&str>) -> Result<()> {
    let mut r = resolve(&args.common, env_seed)?;
    let split = match args.split {
        SplitName::Train => Split::Train,
        SplitName::Val => Split::Val,
        SplitName::Test => Split::Test,
    };
    let mut manifest = Manifest::new("sample", r.seed, &r.config);
    let corpus = load_split(&r.config, split, &mut manifest)?;
    r.fit_ways(corpus.label_set().len());
    let spec = r.config.train.episode;
    let vocab = Vocab::build([&corpus]);
    let convs = encode_corpus(&corpus, &vocab, spec.max_len);
    let sampler = EpisodeSampler::new(&convs, corpus.label_set(), spec)?;
    sampler.check_feasible()?;
    let mut rng = derived_rng(r.seed, STREAM_TRAIN, 0);
    let mut lines = String::new();
    for e in 0..args.common.episodes.unwrap_or(1) {
        let ep = sampler.sample(&mut rng)?;
        for (role, sets) in [("support", &ep.support), ("query", &ep.query)] {
            for (k, ids) in sets.iter().enumerate() {
                for &id in ids {
                    let line = EpisodeLine {
                        episode: e,
                        role,
                        label: &corpus.label_set()[k],
                        kept: convs[id].len(),
                        conversation: &corpus.conversations[id],
                    };
                    lines.push_str(&serde_json::to_string(&line)?);
                    lines.push('\n');
                }
            }
        }
    }
    if r.out_dir().is_some() {
        let dir = out_dir(&r)?;
        manifest.config = r.config.clone();
        write_file(&dir, "episodes.jsonl", &lines, &mut manifest)?;
        manifest.write(&dir)?;
    } else {
        std::io::stdout().lock().write_all(lines.as_bytes())?;
    }
    Ok(())
}

pub fn synth(args: &SynthArgs, env_seed: Option<&str>) -> Result<()> {
    let mut r = resolve(&args.common, env_seed)?;
    let s = &mut r.config.synth;
    if let Some(k) = args.kind {
        s.kind = k;
    }
    if let Some(n) = args.labels {
        s.labels = n;
    }
    if let Some(l) = args.lambda {
        s.lambda = l;
    }
    if let Some(sizes) = &args.sizes {
        s.sizes = sizes.as_slice().try_into().context("--sizes takes three counts")?;
    }
    ensure!(s.labels > 0, "synth.labels must be positive");
    ensure!(s.sizes.iter().all(|&n| n > 0), "synth.sizes must be positive");
    let spec = s.spec();
    let splits = generate_splits(&spec, s.sizes, r.seed)?;

    let dir = out_dir(&r)?;
    let mut written = Vec::new();
    for (corpus, name) in splits.iter().zip(["train", "val", "test"]) {
        let path = dir.join(format!("{name}.jsonl"));
        write_jsonl(corpus, &path)?;
        written.push(path);
    }
    let [train, val, test] = <[PathBuf; 3]>::try_from(written).expect("three splits");
    r.config.data.train = Some(train);
    r.config.data.val = Some(val);
    r.config.data.test = Some(test);
    r.fit_ways(splits.label_set().len());

    let mut manifest = Manifest::new("synth", r.seed, &r.config);
    for name in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        manifest.output(name);
    }
    write_file(&dir, "spec.json", to_json(&spec)?, &mut manifest)?;
    manifest.write(&dir)?;
    println!(
        "wrote {} / {} / {} conversations with labels {:?} to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        splits.label_set(),
        dir.display()
    );
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let mut out = String::new();
    if let Some(path) = &args.metrics {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let report: MetricsReport =
            serde_json::from_str(&text).with_context(|| format!("{} is not a metrics report", path.display()))?;
        out.push_str(&report.render());
    }
    if let Some(path) = &args.satisfaction {
        let corpus = load_corpus(path, Split::Test)?;
        let table = emotion_satisfaction_correlation(&corpus, args.speaker.as_deref())?;
        if !out.is_empty() {
            out.push('\n');
        }
        let who = args.speaker.as_deref().unwrap_or("any speaker");
        out.push_str(&format!(
            "emotion (of {who}) vs satisfaction level, Pearson r over {} conversations\n\n",
            table.conversations
        ));
        out.push_str(&table.render());
    }
    print!("{out}");
    Ok(())
}
