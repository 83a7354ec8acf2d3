use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn safedx(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_safedx"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

/// Config whose artifacts live in `dir`, trained on a 300-row slice of the desk set.
fn workspace(dir: &Path) -> PathBuf {
    let csv = std::fs::read_to_string(data("symptom2disease_desk.csv")).unwrap();
    let slice: Vec<&str> = csv.lines().take(301).collect();
    std::fs::write(dir.join("small.csv"), slice.join("\n") + "\n").unwrap();
    let cfg = json!({
        "model": "model.sdx",
        "corpus": data("dialogues.jsonl"),
        "rules": data("stewardship_rules.json"),
        "ddi": data("ddi.csv"),
        "lexicon": data("drug_lexicon.json"),
        "calibration": "calibration.json",
        "queue_journal": "queue.jsonl",
        "mcd": { "passes": 5, "seed": 0, "reduction": "predicted-class-variance" },
        "training": { "dataset": "small.csv", "profile": "desk" }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_calibrate_and_run_a_case() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path());

    let out = safedx(&cfg, &["train"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("model.sdx").exists());

    let out = safedx(&cfg, &["calibrate", "--target", "0.2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let cal: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("calibration.json")).unwrap()).unwrap();
    assert!(cal["threshold"].as_f64().is_some());

    let out = safedx(
        &cfg,
        &["run-case", "--id", "k1", "--text", "itchy red rash on my arms", "--temperature", "99.1"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let outcome: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(outcome["case_id"], "k1");
    assert!(["completed", "flagged"].contains(&outcome["status"].as_str().unwrap()));

    // Out-of-range vitals are a data error.
    let out = safedx(&cfg, &["run-case", "--id", "k2", "--text", "cough", "--spo2", "20"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("spo2"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path());
    assert_eq!(safedx(&cfg, &["run-case", "--bogus"]).status.code(), Some(1));
    assert_eq!(safedx(&cfg, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(safedx(&cfg, &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = safedx(&dir.path().join("absent.json"), &["train"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    // No checkpoint has been trained yet.
    let cfg = workspace(dir.path());
    let out = safedx(&cfg, &["run-case", "--text", "headache"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}
