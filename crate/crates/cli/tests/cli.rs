use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn small_config() -> Value {
    json!({
        "seed": 5,
        "synth": {"documents": 120, "document_length": 700, "plants": [
            {"kind": "random", "duplicates": 8, "count": 15},
            {"kind": "repeating", "duplicates": 1, "count": 15},
            {"kind": "incrementing", "duplicates": 2, "count": 15}
        ]},
        "stats": {"bootstrap": 20, "permutations": 99},
        "predictor": {"bootstrap": 20, "partition_candidates": ["duplicate_count", "huffman_bits"]}
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    p
}

fn memtax(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memtax"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({"seed": 1, "no_such_key": true}));
    let o = memtax(&["index"], &cfg, &dir.path().join("out"));
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
}

#[test]
fn malformed_json_and_missing_file_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&memtax(&["stats"], &bad, dir.path())), 2);
    assert_eq!(code(&memtax(&["stats"], &dir.path().join("absent.json"), dir.path())), 2);
}

#[test]
fn missing_input_path_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({"paths": {"corpus": "nowhere.bin"}}));
    assert_eq!(code(&memtax(&["index"], &cfg, &dir.path().join("out"))), 2);
}

#[test]
fn evaluate_without_model_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small_config());
    let out = dir.path().join("out");
    let o = memtax(&["evaluate"], &cfg, &out);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.join("eval.json").exists());
}

#[test]
fn corrupt_corpus_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("corpus.bin"), b"MTXC garbage").unwrap();
    let cfg = write_config(dir.path(), "c.json", &json!({"paths": {"corpus": "corpus.bin"}}));
    let o = memtax(&["index"], &cfg, &dir.path().join("out"));
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn full_pipeline_then_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small_config());
    let out = dir.path().join("out");
    for stage in ["synth", "index", "featurize", "taxonomy", "stats", "train", "evaluate"] {
        let o = memtax(&[stage], &cfg, &out);
        assert_eq!(code(&o), 0, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["corpus.bin", "index.mtxi", "features.jsonl", "taxonomy_summary.json", "stats.json", "models.json", "eval.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    assert!(!out.join(".staging-evaluate").exists());

    let eval: Value = serde_json::from_slice(&fs::read(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["meta"]["seed"], 5);

    let mut with_cohorts = small_config();
    with_cohorts["cohorts"] = json!([{"name": "sim", "labels": "out/labels.txt"}]);
    let cfg2 = write_config(dir.path(), "c2.json", &with_cohorts);
    let o = memtax(&["cohort"], &cfg2, &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("cohort.csv")).unwrap();
    assert!(csv.starts_with("Cohort,Recitation Count,Recitation Percent"));
    assert!(csv.lines().nth(1).unwrap().starts_with("sim,"));
}

#[test]
fn featurize_is_idempotent_and_seed_flag_applies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small_config());
    let out = dir.path().join("out");
    for stage in ["synth", "featurize"] {
        assert_eq!(code(&memtax(&[stage, "--seed", "9"], &cfg, &out)), 0);
    }
    let first = snapshot(&out);
    assert_eq!(code(&memtax(&["featurize", "--seed", "9"], &cfg, &out)), 0);
    assert_eq!(first, snapshot(&out));
    let meta: Value = serde_json::from_slice(&fs::read(out.join("features.jsonl.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 9);
}

#[test]
fn cohort_labels_are_checked_only_by_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["cohorts"] = json!([{"name": "later", "labels": "out/missing.txt"}]);
    let cfg = write_config(dir.path(), "c.json", &cfg);
    let out = dir.path().join("out");
    assert_eq!(code(&memtax(&["synth"], &cfg, &out)), 0);
    assert_eq!(code(&memtax(&["cohort"], &cfg, &out)), 2);
}
