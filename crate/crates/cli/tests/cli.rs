// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const TINY: &str = r#"
[train]
episodes_per_epoch = 20
val_episodes = 10
test_episodes = 40
max_epochs = 20
patience = 10
lr = 0.01

[train.model]
embed_dim = 50
cnn_widths = [2, 3]
cnn_filters = 8
hidden = 8
mlp_hidden = 8
proto_dim = 8

[train.episode]
n_shots = 2
n_queries = 3
"#;

fn protoseq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protoseq"))
        .args(args)
        .current_dir(dir)
        .env_remove("PROTOSEQ_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn failed(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure, got success");
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// A separable corpus in `dir/data` plus the tiny run config in `dir/tiny.toml`.
fn setup(dir: &Path) -> PathBuf {
    ok(&protoseq(dir, &["synth", "--sizes", "80,20,20", "--seed", "1", "--out", "data"]));
    let cfg = dir.join("tiny.toml");
    let paths = "[data]\ntrain = \"data/train.jsonl\"\nval = \"data/val.jsonl\"\ntest = \"data/test.jsonl\"\n";
    std::fs::write(&cfg, format!("{paths}{TINY}")).unwrap();
    cfg
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(&protoseq(dir.path(), &["synth", "--kind", "transition-dominant", "--sizes", "30,10,10", "--seed", "4", "--out", out]));
    }
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "spec.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let stdout = ok(&protoseq(d, &["train", "--config", "tiny.toml", "--seed", "2", "--out", "run"]));
    assert!(stdout.contains("F1 (micro)"), "{stdout}");
    let run = d.join("run");
    for f in ["model.ckpt", "history.tsv", "history.json", "metrics.json", "report.txt", "config.toml", "manifest.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let metrics = json(run.join("metrics.json"));
    let f1 = metrics["f1_micro"].as_f64().unwrap();
    assert!(f1 >= 0.9, "test F1-micro {f1}");

    let manifest = json(run.join("manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 2);
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 3);
    for input in inputs {
        let path = input["path"].as_str().unwrap();
        let expected = hex::encode(Sha256::digest(std::fs::read(path).unwrap()));
        assert_eq!(input["sha256"], expected.as_str(), "{path}");
    }

    let rerun = ok(&protoseq(d, &["train", "--config", "run/config.toml", "--out", "rerun"]));
    assert_eq!(rerun, stdout, "the config snapshot reproduces the run");

    let eval = ok(&protoseq(d, &["eval", "--config", "tiny.toml", "--model", "run/model.ckpt", "--seed", "2", "--out", "ev"]));
    assert_eq!(
        std::fs::read_to_string(d.join("ev/report.txt")).unwrap(),
        std::fs::read_to_string(run.join("report.txt")).unwrap()
    );
    assert!(eval.contains("F1 (weighted)"));
    let report = ok(&protoseq(d, &["report", "run/metrics.json"]));
    assert_eq!(report, std::fs::read_to_string(run.join("report.txt")).unwrap());

    let err = failed(&protoseq(
        d,
        &["eval", "--config", "tiny.toml", "--model", "run/model.ckpt", "--variant", "protoseq-nocrf"],
    ));
    assert!(err.contains("protoseq-nocrf") && err.contains("variant"), "{err}");

    let wider = std::fs::read_to_string(d.join("tiny.toml")).unwrap().replace("hidden = 8\n", "hidden = 9\n");
    std::fs::write(d.join("wider.toml"), wider).unwrap();
    failed(&protoseq(d, &["eval", "--config", "wider.toml", "--model", "run/model.ckpt"]));
}

#[test]
fn unknown_variant_lists_the_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let err = failed(&protoseq(dir.path(), &["train", "--variant", "protocrf"]));
    for name in ["proto", "warmproto-crf", "protoseq", "protoseq-cnn", "protoseq-avg", "protoseq-nocrf"] {
        assert!(err.contains(name), "{name} missing from: {err}");
    }
}

#[test]
fn unknown_config_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train.model]\nembedding_dim = 10\n").unwrap();
    let err = failed(&protoseq(dir.path(), &["train", "--config", "bad.toml", "--out", "o"]));
    assert!(err.contains("embedding_dim"), "{err}");
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let err = failed(&protoseq(d, &["train", "--out", "o"]));
    assert!(err.contains("data.train"), "{err}");
    setup(d);
    let err = failed(&protoseq(d, &["train", "--config", "tiny.toml", "--val", "absent.jsonl", "--out", "o"]));
    assert!(err.contains("absent.jsonl"), "{err}");
    assert!(!d.join("o").exists(), "nothing written on failure");
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_protoseq"))
        .args(["synth", "--sizes", "5,5,5", "--out", "s"])
        .current_dir(dir.path())
        .env("PROTOSEQ_SEED", "17")
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(json(dir.path().join("s/manifest.json"))["seed"], 17);
    ok(&protoseq(dir.path(), &["synth", "--sizes", "5,5,5", "--out", "z"]));
    assert_eq!(json(dir.path().join("z/manifest.json"))["seed"], 0);
}

#[test]
fn gradcheck_passes_for_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY.replace("embed_dim = 50", "embed_dim = 6")).unwrap();
    for v in ["proto", "warmproto-crf", "protoseq", "protoseq-cnn", "protoseq-avg", "protoseq-nocrf"] {
        let out = format!("gc-{v}");
        let stdout = ok(&protoseq(d, &["gradcheck", "--config", "tiny.toml", "--variant", v, "--entries", "6", "--out", &out]));
        assert!(stdout.contains(&format!("variant {v}:")), "{stdout}");
        let report = json(d.join(&out).join("gradcheck.json"));
        assert!(report["checked"].as_u64().unwrap() > 0);
        assert!(report["failures"].as_array().unwrap().is_empty());
    }
}

#[test]
fn sample_writes_one_line_per_episode_member() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let stdout = ok(&protoseq(
        d,
        &["sample", "--config", "tiny.toml", "--split", "val", "--shots", "1", "--queries", "2", "--episodes", "3"],
    ));
    let lines: Vec<Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3 * 3 * (1 + 2));
    assert_eq!(lines.iter().filter(|l| l["role"] == "support").count(), 9);
    for l in &lines {
        let label = l["label"].as_str().unwrap();
        let conv = &l["conversation"]["messages"];
        assert!(conv.as_array().unwrap().iter().any(|m| m["label"] == label));
    }
    let again = ok(&protoseq(
        d,
        &["sample", "--config", "tiny.toml", "--split", "val", "--shots", "1", "--queries", "2", "--episodes", "3"],
    ));
    assert_eq!(again, stdout);
}

#[test]
fn satisfaction_report_renders_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::new();
    for (i, (s, labels)) in [(2, ["joy", "joy"]), (-2, ["anger", "neutral"]), (1, ["joy", "neutral"]), (-1, ["anger", "anger"])]
        .iter()
        .enumerate()
    {
        let messages: Vec<Value> = labels
            .iter()
            .map(|l| serde_json::json!({"speaker": "visitor", "text": "hi there", "label": l}))
            .collect();
        let conv = serde_json::json!({"id": format!("c{i}"), "messages": messages, "meta": {"satisfaction": s}});
        text.push_str(&conv.to_string());
        text.push('\n');
    }
    std::fs::write(dir.path().join("sat.jsonl"), text).unwrap();
    let stdout = ok(&protoseq(dir.path(), &["report", "--satisfaction", "sat.jsonl"]));
    for label in ["joy", "anger", "neutral"] {
        assert!(stdout.contains(label), "{stdout}");
    }
    failed(&protoseq(dir.path(), &["report"]));
}
