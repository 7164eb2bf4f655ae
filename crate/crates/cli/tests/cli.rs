use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "\
[data]
train = 40
val = 8
test = 8
min_count = 1

[model]
hidden = 12

[train]
max_epochs_xe = 2
max_epochs_rl = 1

[run]
seeds = 1,2
";

fn rfnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfnet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawning rfnet")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = rfnet(dir, args);
    assert!(
        out.status.success(),
        "rfnet {args:?} failed with {:?}:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_data() -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    ok(dir.path(), &["--config", "small.cfg", "--out", "data", "gen-data"]);
    dir
}

#[test]
fn help_lists_flags_and_defaults() {
    let dir = TempDir::new().unwrap();
    let help = ok(dir.path(), &["--help"]);
    for flag in ["--config", "--seed", "--out", "--views", "--beam", "--max-len", "--lambda", "--ablation"] {
        assert!(help.contains(flag), "missing {flag}");
    }
    for key in ["lr_xe = 0.0005", "batch_size = 10", "lambda = 10", "hidden = 64", "Exit codes"] {
        assert!(help.contains(key), "missing {key}");
    }
}

#[test]
fn gradcheck_passes() {
    let dir = TempDir::new().unwrap();
    let text = ok(dir.path(), &["gradcheck"]);
    let err: f64 = text
        .split_whitespace()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| panic!("unexpected output {text}"));
    assert!(err < 1e-5, "{text}");
}

#[test]
fn training_is_reproducible() {
    let dir = with_data();
    let p = dir.path();
    for run in ["a", "b"] {
        ok(p, &["--config", "small.cfg", "--data", "data", "--seed", "7", "--out", run, "train"]);
    }
    let a = fs::read(p.join("a/model.ckpt")).unwrap();
    let b = fs::read(p.join("b/model.ckpt")).unwrap();
    assert!(a == b, "checkpoints differ");
    assert!(fs::read_to_string(p.join("a/train_log.tsv")).unwrap().lines().count() >= 2);

    // The copied config reproduces the run on its own.
    ok(p, &["--config", "a/config.txt", "--out", "c", "train"]);
    assert!(fs::read(p.join("c/model.ckpt")).unwrap() == a);
}

#[test]
fn full_pipeline() {
    let dir = with_data();
    let p = dir.path();
    let base = ["--config", "small.cfg", "--data", "data"];
    let run = |extra: &[&str]| ok(p, &[&base[..], extra].concat());

    run(&["--out", "xe", "train"]);
    run(&["--checkpoint", "xe/model.ckpt", "--out", "rl", "finetune-rl"]);
    assert!(p.join("rl/model_rl.ckpt").exists());

    run(&["--checkpoint", "rl/model_rl.ckpt", "--beam", "2", "--out", "cap", "caption"]);
    let caps = fs::read_to_string(p.join("cap/captions_test.txt")).unwrap();
    assert_eq!(caps.lines().count(), 8);

    run(&["--checkpoint", "xe/model.ckpt", "--out", "ev", "evaluate"]);
    let metrics = fs::read_to_string(p.join("ev/metrics_test.txt")).unwrap();
    assert!(metrics.contains("cider"), "{metrics}");

    run(&["--out", "ab", "ablate"]);
    let table = fs::read_to_string(p.join("ab/ablation.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5, "{table}");
    assert_eq!(lines[0].split('\t').last(), Some("mean"));
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 4));
    let runs = fs::read_to_string(p.join("ab/ablation_runs.tsv")).unwrap();
    assert_eq!(runs.lines().count(), 9);
}

#[test]
fn exit_codes() {
    let dir = with_data();
    let p = dir.path();
    fs::write(p.join("bad.cfg"), "[train]\nlearning_rate = 1\n").unwrap();
    assert_eq!(rfnet(p, &["--config", "bad.cfg", "train"]).status.code(), Some(2));
    assert_eq!(rfnet(p, &["--beam", "x", "train"]).status.code(), Some(2));
    assert_eq!(rfnet(p, &["--data", "nowhere", "train"]).status.code(), Some(3));
    assert_eq!(rfnet(p, &["--data", "data", "caption"]).status.code(), Some(2));

    fs::write(p.join("nan.cfg"), format!("{SMALL}\n[train]\nlr_xe = 1e200\nclip = 0\n")).unwrap();
    let out = rfnet(p, &["--config", "nan.cfg", "--data", "data", "train"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}
