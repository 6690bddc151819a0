use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "dataset": { "seed": 4, "n_train": 6, "n_val": 2, "n_test": 3, "grid_size": 2 },
  "model": { "d_model": 8, "n_layers": 1, "n_heads": 2, "image_cells": 4 },
  "train": { "epochs": 1, "batch_size": 3 },
  "eval": { "diagnostic_examples": 1, "diagnostic_samples": 2 }
}"#;

fn mccot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mccot")).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn vote_writes_conformance_values() {
    let dir = tempfile::tempdir().unwrap();
    let stack = dir.path().join("stack.json");
    fs::write(&stack, r#"{"shape": [2, 1, 3], "data": [1, 4, 0, 3, 2, 0]}"#).unwrap();
    let out = dir.path().join("out");
    let o = mccot(&["vote", "--stack", stack.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let voted: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("voted.json")).unwrap()).unwrap();
    let fin: Vec<f64> = voted["final"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for (got, want) in fin.iter().zip([1.453081, 2.179622, 0.0]) {
        assert!((got - want).abs() < 1e-6, "{fin:?}");
    }
}

#[test]
fn malformed_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"learning_rat": 0.1}}"#).unwrap();
    assert_eq!(mccot(&["--config", bad.to_str().unwrap(), "gen-data"]).status.code(), Some(2));
    let missing = dir.path().join("nope.json");
    assert_eq!(mccot(&["vote", "--stack", missing.to_str().unwrap()]).status.code(), Some(1));
    let cfg = tiny_config(dir.path());
    assert_eq!(mccot(&["--config", &cfg, "ablate", "--modes", "full,bogus"]).status.code(), Some(2));
    assert_eq!(mccot(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn gen_data_writes_three_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("data");
    let o = mccot(&["--config", &cfg, "--out", out.to_str().unwrap(), "gen-data"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for (name, n) in [("train.jsonl", 6), ("val.jsonl", 2), ("test.jsonl", 3)] {
        assert_eq!(fs::read_to_string(out.join(name)).unwrap().lines().count(), n);
    }
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert!(mccot(&["--config", &cfg, "--out", data.to_str().unwrap(), "gen-data"]).status.success());
    let run = dir.path().join("run");
    let o = mccot(&["--config", &cfg, "--out", run.to_str().unwrap(), "train", "--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["stage1.ckpt", "stage2.ckpt", "metrics.csv", "report.json", "losscurve.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let curve = fs::read_to_string(run.join("losscurve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("stage,epoch,batch,loss"));

    let again = dir.path().join("eval");
    let o = mccot(&[
        "--config",
        &cfg,
        "--out",
        again.to_str().unwrap(),
        "eval",
        "--stage1",
        run.join("stage1.ckpt").to_str().unwrap(),
        "--stage2",
        run.join("stage2.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(run.join("metrics.csv")).unwrap(), fs::read(again.join("metrics.csv")).unwrap());
}

#[test]
fn eval_without_stage1_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    assert!(mccot(&["--config", &cfg, "--out", run.to_str().unwrap(), "train"]).status.success());
    let o = mccot(&[
        "--config",
        &cfg,
        "--out",
        run.to_str().unwrap(),
        "eval",
        "--stage2",
        run.join("stage2.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_writes_fixed_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("abl");
    let o = mccot(&[
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "ablate",
        "--modes",
        "full,no_rationale",
        "--seeds",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("mode,seed,test_accuracy,rouge_l,bias_sq,variance,residual,jensen_gap"));
    assert!(lines.next().unwrap().starts_with("full,0,"));
    assert!(lines.next().unwrap().starts_with("no_rationale,0,"));
    assert!(out.join("summary.csv").exists());
}

#[test]
fn gradcheck_command_passes() {
    let o = mccot(&["gradcheck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max_rel_error"));
}
