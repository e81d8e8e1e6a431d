//! End-to-end smoke tests for the command-line binary: exit codes,
//! file outputs, and the error surface.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_unimeec"))
}

fn tiny_config() -> String {
    serde_json::json!({
        "model": {"d_model": 16, "n_heads": 2, "d_ffn": 24, "max_conv_len": 5},
        "thc": {"layers": 1, "heads": [2], "window": 1},
        "prompt": {"x_capacity": 4},
        "train": {"epochs": 2, "batch_size": 4},
        "synth": {
            "conversations": 5, "vocab_size": 14,
            "min_utterances": 2, "max_utterances": 4,
            "audio_dim": 3, "vision_dim": 3, "audio_len": 4, "vision_len": 3
        }
    })
    .to_string()
}

#[test]
fn synth_train_eval_pipeline_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, tiny_config()).unwrap();
    let data = dir.path().join("data.jsonl");
    let outdir = dir.path().join("run");
    let report = dir.path().join("report.json");

    let st = bin()
        .args(["synth", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(st.success());
    assert!(data.exists());

    let st = bin()
        .args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            outdir.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(st.success());
    assert!(outdir.join("checkpoint.bin").exists());
    let log = std::fs::read_to_string(outdir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2, "one record per epoch");
    for line in log.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["epoch"].is_u64());
        assert!(rec["l_merc"].is_f64());
    }

    let st = bin()
        .args([
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            outdir.join("checkpoint.bin").to_str().unwrap(),
            "--report",
            report.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(st.success());
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["acc", "wf1", "per_class", "cause", "pair"] {
        assert!(!rep[key].is_null(), "report missing {key}");
    }
}

#[test]
fn mismatched_checkpoint_fails_with_runtime_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, tiny_config()).unwrap();
    let data = dir.path().join("data.jsonl");
    let outdir = dir.path().join("run");

    for args in [
        vec!["synth", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()],
        vec![
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            outdir.to_str().unwrap(),
        ],
    ] {
        assert!(bin().args(&args).status().unwrap().success());
    }

    // a corpus with a different feature width cannot be evaluated
    let other_cfg = dir.path().join("other.json");
    std::fs::write(
        &other_cfg,
        tiny_config().replace("\"audio_dim\":3", "\"audio_dim\":7"),
    )
    .unwrap();
    let other_data = dir.path().join("other.jsonl");
    assert!(bin()
        .args([
            "synth",
            "--config",
            other_cfg.to_str().unwrap(),
            "--out",
            other_data.to_str().unwrap()
        ])
        .status()
        .unwrap()
        .success());

    let out = bin()
        .args([
            "eval",
            "--data",
            other_data.to_str().unwrap(),
            "--checkpoint",
            outdir.join("checkpoint.bin").to_str().unwrap(),
            "--report",
            dir.path().join("r.json").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error:"), "stderr was: {stderr}");
}

#[test]
fn unknown_flag_fails_with_usage_exit_code() {
    let out = bin().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_and_respects_threshold() {
    let out = bin().args(["gradcheck"]).output().unwrap();
    assert!(out.status.success(), "gradcheck failed: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("max relative error"), "stdout was: {stdout}");

    // an absurd threshold must flip the verdict and the exit code
    let out = bin()
        .args(["gradcheck", "--tolerance", "1e-18"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
