use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

fn rac(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rac")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn usage_errors_exit_2_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = rac(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "UsageError");
}

#[test]
fn runtime_failures_exit_1_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = rac(&["ingest", "--corpus", "missing.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "Failure");

    let out = rac(&["classify", "--text", "x", "--mode", "rac(3)", "--index", "nope.bin"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fixture_index_classify_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let v = stdout_json(&rac(&["fixture", "--out", "corpus.jsonl"], d));
    assert_eq!(v["documents"], 90);
    let v = stdout_json(&rac(&["ingest", "--corpus", "corpus.jsonl"], d));
    assert_eq!(v["documents"], 90);
    let v = stdout_json(&rac(&["index", "--corpus", "corpus.jsonl", "--out", "idx.bin"], d));
    assert_eq!(v["records"], 60);

    // Classify a training document's text and expect its own class back.
    let corpus = std::fs::read_to_string(d.join("corpus.jsonl")).unwrap();
    let doc: Value = corpus
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .find(|v| v["label"] == "Confidential" && v["partition"] == "test")
        .unwrap();
    let text = doc["body"].as_str().unwrap();
    let v = stdout_json(&rac(&["classify", "--text", text, "--mode", "rac", "--shots", "6", "--index", "idx.bin"], d));
    assert_eq!(v["mode"], "rac(6)");
    assert_eq!(v["prediction"], "Confidential");
    assert_eq!(v["exemplars"].as_array().unwrap().len(), 6);
}

#[test]
fn evaluate_writes_full_run_directory_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    stdout_json(&rac(&["fixture", "--out", "corpus.jsonl"], d));
    let start = Instant::now();
    let v = stdout_json(&rac(&["evaluate", "--corpus", "corpus.jsonl", "--shots", "0,3,6,9", "--run-dir", "run"], d));
    assert!(start.elapsed() < Duration::from_secs(60));
    assert_eq!(v["runs"].as_array().unwrap().len(), 6);
    let run = d.join("run");
    for stem in ["llm_only", "llm_with_definitions", "rac_0", "rac_3", "rac_6", "rac_9"] {
        for f in [format!("runs/{stem}.jsonl"), format!("traces/{stem}.jsonl"), format!("reports/{stem}.json")] {
            assert!(run.join(&f).is_file(), "missing {f}");
        }
    }
    for f in ["config.json", "comparison.tsv", "comparison.json", "prompts/classification_template.txt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let table = std::fs::read_to_string(run.join("comparison.tsv")).unwrap();
    assert_eq!(table.lines().count(), 7);
    assert!(table.starts_with("Model\tMacro F1\t95% CI"));

    // An external run file joins the comparison under its file stem.
    let v = stdout_json(&rac(
        &[
            "evaluate",
            "--corpus",
            "corpus.jsonl",
            "--modes",
            "llm_only",
            "--extra-run",
            "run/runs/rac_3.jsonl",
            "--run-dir",
            "run2",
        ],
        d,
    ));
    assert_eq!(v["runs"].as_array().unwrap().len(), 1);
    let table = std::fs::read_to_string(d.join("run2/comparison.tsv")).unwrap();
    assert!(table.lines().any(|l| l.starts_with("rac_3\t")), "{table}");
}

#[test]
fn augment_appends_unique_synthetic_documents() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    stdout_json(&rac(&["fixture", "--out", "corpus.jsonl"], d));
    let v = stdout_json(&rac(&["augment", "--corpus", "corpus.jsonl", "--target", "5", "--out", "syn.jsonl"], d));
    assert_eq!(v["accepted"], 5);
    assert_eq!(v["audit_violations"], 0);
    let lines = std::fs::read_to_string(d.join("syn.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 5);
    assert!(lines.lines().all(|l| l.contains("\"synthetic\"")));
}

#[test]
fn config_subcommand_prints_effective_settings() {
    let dir = tempfile::tempdir().unwrap();
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/default.json");
    let v = stdout_json(&rac(&["--config", shipped.to_str().unwrap(), "config"], dir.path()));
    assert_eq!(v["retrieval"]["k_retrieve"], 30);
    std::fs::write(dir.path().join("bad.json"), r#"{"retrieval": {"k_retrieve": 0}}"#).unwrap();
    let out = rac(&["--config", "bad.json", "config"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}
