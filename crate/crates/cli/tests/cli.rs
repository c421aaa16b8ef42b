//! End-to-end checks of the binary: subcommand artifacts, determinism of
//! emitted files, and the documented exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

fn safelm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_safelm"))
}

fn tiny_config_json() -> String {
    r#"{
        "model": {"kind": "logreg", "features": 5, "classes": 3},
        "K": 3,
        "rounds": 2,
        "mode": "secure_majority",
        "key_bits": 256,
        "alpha": 0.05,
        "seeds": [7],
        "local": {"epochs": 1, "batch": 8, "lr": 0.05, "smote_k": 3},
        "data": {"classes": 3, "features": 5, "per_class": 20, "separation": 3.0,
                 "imbalance_ratio": 1.0, "test_fraction": 0.25},
        "toggles": {"encryption": true, "smartification": true, "smote": true,
                     "dp": true, "adversarial_training": false, "guard": true}
    }"#
    .to_string()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, tiny_config_json()).unwrap();
    path
}

#[test]
fn keygen_writes_parseable_document() {
    let dir = tempfile::tempdir().unwrap();
    let status = safelm()
        .args(["keygen", "--bits", "256", "--seed", "9"])
        .arg("--out")
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    let doc = fs::read_to_string(dir.path().join("keypair.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&doc).unwrap();
    assert_eq!(parsed["bits"], 256);
    assert!(parsed["n"].as_str().unwrap().len() > 32);
}

#[test]
fn simulate_emits_deterministic_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let status = safelm()
            .arg("simulate")
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let run_dir_name = |root: &Path| {
        let mut entries = fs::read_dir(root).unwrap();
        entries.next().unwrap().unwrap().path()
    };
    let (da, db) = (run_dir_name(&out_a), run_dir_name(&out_b));
    for file in ["rounds.csv", "summary.json"] {
        let a = fs::read(da.join(file)).unwrap();
        let b = fs::read(db.join(file)).unwrap();
        assert_eq!(a, b, "{file} not reproducible");
    }
    let csv = fs::read_to_string(da.join("rounds.csv")).unwrap();
    assert!(csv.starts_with("round,acc,macro_f1,logical_bits_cum,wire_bits_cum,gamma_mean,asr,notes\n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn bad_config_exits_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"momentum": 2.5}"#).unwrap();
    let output = safelm()
        .arg("simulate")
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("momentum"), "stderr: {stderr}");
}

#[test]
fn mode_override_rejects_nonsense() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let output = safelm()
        .arg("simulate")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .args(["--mode", "quantum_blockchain"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn bench_compression_reports_exact_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let output = safelm()
        .args(["bench-compression", "--d", "35", "--key-bits", "2048"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("ratio 32.0000x"), "stdout: {stdout}");
    let csv = fs::read_to_string(dir.path().join("compression.csv")).unwrap();
    assert!(csv.contains("full32,1120,1"));
    assert!(csv.contains("binarized,35,32"));
    assert!(csv.contains("ciphertext_2048,143360,"));
}

#[test]
fn guard_score_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("claims.csv");
    fs::write(&input, "nli_scores,confidence\n0.5;0.7,0.8\n0.9;0.9;0.9,0.9\n").unwrap();
    let out = dir.path().join("decisions.csv");
    let status = safelm()
        .arg("guard-score")
        .arg("--input")
        .arg(&input)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "score,decision");
    assert_eq!(lines.next().unwrap(), "0.48,abstain_or_regenerate");
    assert!(lines.next().unwrap().ends_with(",pass"));
}

#[test]
fn attack_poison_requires_attack_section() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let output = safelm()
        .arg("attack-poison")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn attack_inversion_emits_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("inv");
    let status = safelm()
        .arg("attack-inversion")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--trials", "3", "--iters", "60", "--dump-reconstructions"])
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("inversion.json")).unwrap()).unwrap();
    assert_eq!(report["trials"].as_array().unwrap().len(), 3);
    assert!(out.join("inversion_trials.csv").exists());
    let recon = fs::read_to_string(out.join("reconstructions.csv")).unwrap();
    // 3 trials x 5 coords + header
    assert_eq!(recon.lines().count(), 16);
}
