// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

const SMALL_CONFIG: &str = r#"{
  "detectors": [
    {"kind": "moving_average", "params": {"window": 12}},
    {"kind": "chebyshev"},
    {"kind": "mediff", "params": {"period": 48}},
    {"kind": "isolation_forest", "params": {"trees": 20}}
  ],
  "period": 48,
  "esd_window": 64,
  "classifier": {"window": 8, "d_model": 4, "channels": 3},
  "train": {"epochs": 2}
}"#;

fn ymir(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ymir"))
        .args(args)
        .current_dir(dir)
        .env_remove("YMIR_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = ymir(args, dir);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let profile = r#"{"len": 1200, "n_metrics": 3, "period": 48, "spikes": 4, "phase_violations": 2,
        "level_shifts": 2, "decorrelations": 2, "restarts": 2, "seed": 11}"#;
    std::fs::write(dir.path().join("profile.json"), profile).unwrap();
    std::fs::write(dir.path().join("config.json"), SMALL_CONFIG).unwrap();
    ok(&["synth", "--out", "syn", "--profile", "profile.json"], dir.path());
    dir
}

#[test]
fn train_detect_eval_round_trip() {
    let dir = setup();
    let d = dir.path();
    ok(&["train", "--data", "syn/data.csv", "--labels", "syn/labels.csv", "--config", "config.json", "--out", "model"], d);
    let manifest: serde_json::Value = serde_json::from_str(&read(d.join("model/manifest.json"))).unwrap();
    assert_eq!(manifest["mode"], "supervised");
    assert_eq!(manifest["detectors"].as_array().unwrap().len(), 4);
    assert!(d.join("model/classifier.json").exists());

    ok(&["detect", "--data", "syn/data.csv", "--model", "model", "--out", "off"], d);
    let scores = read(d.join("off/scores.csv"));
    assert!(scores.starts_with("timestamp,moving_average,chebyshev,mediff,isolation_forest,aggregate,classifier,flag\n"));
    assert_eq!(scores.lines().count(), 1201);
    for batch in ["1", "7", "100"] {
        let out = format!("stream{batch}");
        ok(&["detect", "--data", "syn/data.csv", "--model", "model", "--out", &out, "--mode", "stream", "--batch", batch], d);
        assert_eq!(read(d.join(&out).join("scores.csv")), scores, "batch {batch}");
        assert_eq!(read(d.join(&out).join("result.json")), read(d.join("off/result.json")));
    }

    ok(&["eval", "--scores", "off/scores.csv", "--labels", "syn/labels.csv", "--out", "report.json"], d);
    let report: serde_json::Value = serde_json::from_str(&read(d.join("report.json"))).unwrap();
    for key in ["best_f1", "threshold", "precision", "recall", "curve"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    let again = ok(&["eval", "--scores", "off/scores.csv", "--labels", "syn/labels.csv"], d);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), read(d.join("report.json")));
}

#[test]
fn unsupervised_without_labels() {
    let dir = setup();
    let d = dir.path();
    ok(&["train", "--data", "syn/data.csv", "--config", "config.json", "--out", "model"], d);
    let manifest: serde_json::Value = serde_json::from_str(&read(d.join("model/manifest.json"))).unwrap();
    assert_eq!(manifest["mode"], "unsupervised");
    assert!(manifest["classifier"].is_null());
    ok(&["detect", "--data", "syn/data.csv", "--model", "model", "--out", "off"], d);
    let first = read(d.join("off/scores.csv"));
    let row = first.lines().nth(1).unwrap();
    assert!(row.contains(",,"), "classifier column should be empty: {row}");
}

#[test]
fn seed_variable_drives_training() {
    let dir = setup();
    let d = dir.path();
    let train = |out: &str, seed: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_ymir"))
            .args(["train", "--data", "syn/data.csv", "--labels", "syn/labels.csv", "--config", "config.json", "--out", out])
            .current_dir(d)
            .env("YMIR_SEED", seed)
            .status()
            .unwrap();
        assert!(status.success());
        read(d.join(out).join("classifier.json"))
    };
    let a = train("a", "5");
    assert_eq!(a, train("b", "5"));
    assert_ne!(a, train("c", "6"));
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(ymir(&["train", "--bogus"], d).status.code(), Some(2));
    assert_eq!(ymir(&["detect", "--data", "syn/data.csv"], d).status.code(), Some(2));
    assert_eq!(ymir(&["train", "--data", "missing.csv", "--out", "m"], d).status.code(), Some(3));

    ok(&["train", "--data", "syn/data.csv", "--config", "config.json", "--out", "model"], d);
    // renamed metric column: refused before any output is written
    let data = read(d.join("syn/data.csv")).replacen("metric_0", "other", 1);
    std::fs::write(d.join("renamed.csv"), data).unwrap();
    let out = ymir(&["detect", "--data", "renamed.csv", "--model", "model", "--out", "bad"], d);
    assert_eq!(out.status.code(), Some(3));
    assert!(!d.join("bad/scores.csv").exists());

    std::fs::write(d.join("sparse.csv"), "timestamp,label\n").unwrap();
    ok(&["detect", "--data", "syn/data.csv", "--model", "model", "--out", "off"], d);
    assert_eq!(ymir(&["eval", "--scores", "off/scores.csv", "--labels", "sparse.csv"], d).status.code(), Some(3));

    std::fs::write(d.join("diverge.json"), r#"{"detectors": [{"kind": "chebyshev"}], "classifier": {"window": 8, "d_model": 4, "channels": 3}, "train": {"epochs": 3, "learning_rate": 1e300}}"#).unwrap();
    let out = ymir(&["train", "--data", "syn/data.csv", "--labels", "syn/labels.csv", "--config", "diverge.json", "--out", "m2"], d);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
