use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn actret(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_actret"))
        .args(args)
        .env("ACTRET_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn actret")
}

fn ok_json(args: &[&str]) -> Value {
    let out = actret(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.trim()).expect("stdout is one JSON document")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn png_size(path: &Path) -> (u32, u32) {
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    let be = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
    (be(16), be(20))
}

#[test]
fn generate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let ra = ok_json(&["--out", p(&a), "--seed", "11", "generate", "--per-class", "4"]);
    let rb = ok_json(&["--out", p(&b), "--seed", "11", "generate", "--per-class", "4"]);
    assert_eq!(ra["checksum"], rb["checksum"]);
    assert_eq!(ra["samples"], rb["samples"]);
    assert_eq!(ra["schema_version"], 1);
    let rc = ok_json(&["--out", p(&tmp.path().join("c")), "--seed", "12", "generate", "--per-class", "4"]);
    assert_ne!(ra["checksum"], rc["checksum"]);
}

#[test]
fn single_class_is_rejected_with_one_line_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = actret(&["--out", p(&tmp.path().join("d")), "generate", "--classes", "1"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    assert!(lines[0].starts_with("error[config]: "), "{stderr}");
    assert!(!tmp.path().join("d").exists());
}

#[test]
fn usage_errors_are_one_line() {
    let out = actret(&["train"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error[usage]: "));
    assert!(actret(&["--help"]).status.success());
}

#[test]
fn missing_dataset_reports_io() {
    let tmp = tempfile::tempdir().unwrap();
    let out = actret(&["--out", p(tmp.path()), "train", "--data", p(&tmp.path().join("none"))]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.starts_with("error[io]: "), "{stderr}");
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_actret"))
        .args(["generate"])
        .env("ACTRET_THREADS", "zero")
        .output()
        .unwrap();
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[config]: "));
}

#[test]
fn train_retrieve_montage_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    ok_json(&["--out", p(&data), "generate", "--per-class", "6"]);
    let t = ok_json(&["--out", p(&out), "train", "--data", p(&data), "--epochs", "2"]);
    assert_eq!(t["tokens"], 5);
    let ckpt = out.join("checkpoint.ackpt");
    assert!(ckpt.exists());

    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["schema_version"], 1);
        assert_eq!(r["epoch"], i + 1);
        assert!(r["train_loss"].as_f64().unwrap().is_finite());
    }

    let r = ok_json(&["--out", p(&out), "retrieve-evaluate", "--checkpoint", p(&ckpt), "--data", p(&data), "--rerank", "--limit", "3"]);
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["schema_version"], 1);
    assert_eq!(metrics["map"], r["map"]);
    assert_eq!(metrics["params"]["reranked"], true);
    let ranked = std::fs::read_to_string(out.join("ranked_lists.jsonl")).unwrap();
    for line in ranked.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["ranked_ids"].as_array().unwrap().len(), 3);
        assert!(!v["ranked_ids"].as_array().unwrap().contains(&v["query_id"]));
    }

    // Embeddings file and direct extraction agree.
    ok_json(&["--out", p(&out), "extract", "--checkpoint", p(&ckpt), "--data", p(&data)]);
    let raw_a = ok_json(&["--out", p(&tmp.path().join("ra")), "retrieve-evaluate", "--checkpoint", p(&ckpt), "--data", p(&data)]);
    let raw_b = ok_json(&["--out", p(&tmp.path().join("rb")), "retrieve-evaluate", "--embeddings", p(&out.join("embeddings.aemb"))]);
    assert_eq!(raw_a["map"], raw_b["map"]);
    assert_eq!(raw_a["rank1"], raw_b["rank1"]);

    let png = out.join("grid.png");
    let m = ok_json(&["montage", "--ranked", p(&out.join("ranked_lists.jsonl")), "--data", p(&data), "--output", p(&png), "--queries", "1", "--limit", "8"]);
    assert_eq!(m["columns"], 9);
    assert_eq!(png_size(&png), (9 * 64, 64));
}

#[test]
fn ablation_flags_change_token_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok_json(&["--out", p(&data), "generate", "--per-class", "4"]);
    let t = ok_json(&["--out", p(&tmp.path().join("g")), "train", "--data", p(&data), "--epochs", "1", "--no-anchored", "--no-contextual"]);
    assert_eq!(t["tokens"], 1);
    let t = ok_json(&["--out", p(&tmp.path().join("c")), "train", "--data", p(&data), "--epochs", "1", "--no-global", "--no-pos", "--no-type", "--blocks", "1"]);
    assert_eq!(t["tokens"], 4);
}
