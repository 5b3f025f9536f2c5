use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hgformer::tensor::{write_checkpoint_file, Tensor};
use serde_json::Value;

fn hgformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgformer"))
        .args(args)
        .env("HGF_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_matches_golden() {
    for (args, golden) in [
        (vec!["--help"], "tests/golden/help.txt"),
        (vec!["topology", "--help"], "tests/golden/topology_help.txt"),
    ] {
        let out = hgformer(&args);
        assert_eq!(code(&out), 0);
        assert_eq!(String::from_utf8(out.stdout).unwrap(), fs::read_to_string(golden).unwrap());
    }
}

#[test]
fn invalid_invocations_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.json");
    for args in [
        vec!["frobnicate"],
        vec!["topology", "--ne", "2"],
        vec!["topology", "--ne", "2", "--k", "3", "--distance", "manhattan", "--out", p(&out)],
        vec!["topology", "--ne", "0", "--k", "3", "--out", p(&out)],
        vec!["topology", "--ne", "2", "--k", "3", "--input", "/nonexistent.hgfw", "--out", p(&out)],
        vec!["forward", "--variant", "XL", "--out", p(&out)],
        vec!["train", "--epochs", "0", "--out", p(dir.path())],
    ] {
        let res = hgformer(&args);
        assert_eq!(code(&res), 1, "{args:?}: {}", String::from_utf8_lossy(&res.stderr));
    }
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_hgformer"))
        .args(["topology", "--ne", "2", "--k", "2", "--out", p(&out)])
        .env("HGF_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&bad_threads), 1);
}

#[test]
fn four_token_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("tokens.hgfw");
    let nodes = Tensor::from_rows(&[[2.0, 0.0], [0.0, 2.0], [1.9, 0.1], [-1.0, 0.0]]).unwrap();
    let cls = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
    write_checkpoint_file(&input, &[("input", &nodes), ("class_token", &cls)]).unwrap();
    let out = dir.path().join("topo.json");
    let res = hgformer(&["topology", "--input", p(&input), "--ne", "2", "--k", "2", "--out", p(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let t = read_json(&out);
    assert_eq!(t["grid"], serde_json::json!([2, 2]));
    assert_eq!(t["centers"], serde_json::json!([0, 2]));
    assert_eq!(t["edges"], serde_json::json!([[0, 2], [0, 2]]));
    assert_eq!(t["node_degrees"], serde_json::json!([2, 0, 2, 0]));
    let scores: Vec<f64> = t["scores"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let want = [2.0 / 2f64.sqrt(), 0.0, 1.9 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
    for (s, want) in scores.iter().zip(want) {
        assert!((s - want).abs() < 1e-4, "{scores:?}");
    }
}

#[test]
fn forward_reports_logits_and_stage_grids() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f.json");
    let res = hgformer(&["forward", "--image-size", "16", "--out", p(&out)]);
    assert_eq!(code(&res), 0);
    let f = read_json(&out);
    assert_eq!(f["logits"].as_array().unwrap().len(), 4);
    assert_eq!(f["stage_grids"], serde_json::json!([[4, 4], [2, 2], [1, 1], [1, 1]]));
    assert_eq!(f["input"], "synthetic-v1");
}

#[test]
fn gradcheck_passes_and_a_corrupted_rule_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dir.path().join("ok.json");
    let res = hgformer(&["gradcheck", "--coords", "2", "--out", p(&ok)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(read_json(&ok)["passed"], true);

    let bad = dir.path().join("bad.json");
    let res = hgformer(&["gradcheck", "--coords", "2", "--corrupt", "layer_norm", "--out", p(&bad)]);
    assert_eq!(code(&res), 2);
    let report = read_json(&bad);
    assert_eq!(report["passed"], false);
    assert!(!report["failures"].as_array().unwrap().is_empty());
}

#[test]
fn diverging_training_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let res = hgformer(&[
        "train", "--epochs", "20", "--lr", "1e12", "--warmup-epochs", "0", "--samples-per-class", "4",
        "--image-size", "8", "--out", p(dir.path()),
    ]);
    assert_eq!(code(&res), 2, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn train_writes_report_timing_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let res = hgformer(&[
        "train", "--epochs", "2", "--samples-per-class", "5", "--image-size", "16", "--out", p(dir.path()),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let report = read_json(&dir.path().join("run_report.json"));
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    assert!(report.get("timing").is_none());
    assert!(read_json(&dir.path().join("timing.json"))["wall_s"].as_f64().unwrap() > 0.0);
    let ckpt = dir.path().join("checkpoint.hgfw");
    let fwd = dir.path().join("f.json");
    let res = hgformer(&["forward", "--checkpoint", p(&ckpt), "--out", p(&fwd)]);
    assert_eq!(code(&res), 0);
}

#[test]
fn ablate_writes_per_run_and_summary_tables() {
    let dir = tempfile::tempdir().unwrap();
    let res = hgformer(&[
        "ablate", "--arms", "distance", "--seeds", "1", "--epochs", "1", "--samples-per-class", "3",
        "--image-size", "8", "--out", p(dir.path()),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "arm,seed,final_acc,wall_s");
    assert_eq!(lines.len(), 5);
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary.as_array().unwrap().len(), 4);
}
