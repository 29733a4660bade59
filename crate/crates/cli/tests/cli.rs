//! End-to-end tests of the `baa` binary: the full pipeline on synthetic data,
//! config handling, and the exit-code contract (0 ok, 2 input error,
//! 3 divergence).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn baa(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_baa"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn baa")
}

fn assert_exit(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn synth(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let data = dir.join("data");
    let out = baa(
        &[
            "synth",
            "--out",
            data.to_str().unwrap(),
            "--n",
            &n.to_string(),
            "--seed",
            &seed.to_string(),
        ],
        dir,
    );
    assert_exit(&out, 0);
    data
}

/// Train fast on synthetic data; returns the run directory.
fn train_quick(dir: &Path, data: &Path, regime: &str, seed: u64) -> PathBuf {
    let out = baa(
        &[
            "train",
            "--csv",
            data.join("manifest.csv").to_str().unwrap(),
            "--images",
            data.to_str().unwrap(),
            "--out",
            dir.join("runs").to_str().unwrap(),
            "--backbone",
            "tiny_test",
            "--regime",
            regime,
            "--epochs",
            "3",
            "--patience",
            "3",
            "--batch-size",
            "8",
            "--lr",
            "0.5",
            "--seed",
            &seed.to_string(),
            "--train-size",
            "16",
            "--val-size",
            "8",
            "--test-size",
            "8",
            "--dropout-rate",
            "0",
        ],
        dir,
    );
    assert_exit(&out, 0);
    dir.join("runs").join(format!("tiny_test_{regime}"))
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = synth(dir, 32, 7);
    assert!(data.join("manifest.csv").is_file());
    assert!(data.join("synth_00031.png").is_file());

    // stats
    let stats_out = dir.join("stats");
    let out = baa(
        &[
            "stats",
            "--csv",
            data.join("manifest.csv").to_str().unwrap(),
            "--images",
            data.to_str().unwrap(),
            "--out",
            stats_out.to_str().unwrap(),
            "--strict",
        ],
        dir,
    );
    assert_exit(&out, 0);
    for f in [
        "stats.json",
        "age_distribution.png",
        "gender_distribution.png",
        "bias_report.json",
        "bias_report.txt",
        "effective_config.json",
    ] {
        assert!(stats_out.join(f).is_file(), "missing {f}");
    }
    let stats: serde_json::Value =
        serde_json::from_slice(&fs::read(stats_out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["total"], 32);

    // split
    let split_path = dir.join("split.json");
    let out = baa(
        &[
            "split",
            "--csv",
            data.join("manifest.csv").to_str().unwrap(),
            "--images",
            data.to_str().unwrap(),
            "--train",
            "16",
            "--val",
            "8",
            "--test",
            "8",
            "--seed",
            "42",
            "--out",
            split_path.to_str().unwrap(),
        ],
        dir,
    );
    assert_exit(&out, 0);
    let split: serde_json::Value =
        serde_json::from_slice(&fs::read(&split_path).unwrap()).unwrap();
    assert_eq!(split["seed"], 42);
    assert_eq!(split["test_ids"].as_array().unwrap().len(), 8);

    // train both regimes
    let full_dir = train_quick(dir, &data, "full", 3);
    let frozen_dir = train_quick(dir, &data, "frozen", 3);
    for run in [&full_dir, &frozen_dir] {
        for f in [
            "checkpoint.baaw",
            "checkpoint.json",
            "history.json",
            "learning_curve.png",
            "effective_config.json",
            "split.json",
        ] {
            assert!(run.join(f).is_file(), "missing {f} in {}", run.display());
        }
    }
    let sidecar: serde_json::Value =
        serde_json::from_slice(&fs::read(frozen_dir.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(sidecar["regime"], "frozen");

    // evaluate both
    for run in [&full_dir, &frozen_dir] {
        let out = baa(
            &[
                "evaluate",
                "--checkpoint",
                run.join("checkpoint.baaw").to_str().unwrap(),
                "--config",
                run.join("effective_config.json").to_str().unwrap(),
            ],
            dir,
        );
        assert_exit(&out, 0);
        for f in ["predictions.csv", "scatter.png", "metrics.json", "bias_report.json"] {
            assert!(run.join(f).is_file(), "missing {f}");
        }
    }

    // predictions row count equals the requested test-split size
    let csv = fs::read_to_string(full_dir.join("predictions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
    let eff: serde_json::Value =
        serde_json::from_slice(&fs::read(full_dir.join("effective_config.json")).unwrap())
            .unwrap();
    assert_eq!(eff["test_size"], 8);

    // compare
    let cmp_out = dir.join("cmp");
    let out = baa(
        &[
            "compare",
            full_dir.to_str().unwrap(),
            frozen_dir.to_str().unwrap(),
            "--out",
            cmp_out.to_str().unwrap(),
        ],
        dir,
    );
    assert_exit(&out, 0);
    let md = fs::read_to_string(cmp_out.join("comparison.md")).unwrap();
    assert!(md.contains("tiny_test"));
    let table: serde_json::Value =
        serde_json::from_slice(&fs::read(cmp_out.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 1);
    assert!(table["rows"][0]["mae_full"].is_number());
    assert!(table["rows"][0]["mae_frozen"].is_number());
}

#[test]
fn synth_is_deterministic_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(&tmp.path().join("a"), 12, 9);
    let b = synth(&tmp.path().join("b"), 12, 9);
    assert_eq!(
        fs::read(a.join("manifest.csv")).unwrap(),
        fs::read(b.join("manifest.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("synth_00005.png")).unwrap(),
        fs::read(b.join("synth_00005.png")).unwrap()
    );
}

#[test]
fn empty_manifest_stats_succeed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("empty.csv"), "id,boneage,male\n").unwrap();
    let out = baa(
        &[
            "stats",
            "--csv",
            dir.join("empty.csv").to_str().unwrap(),
            "--images",
            dir.to_str().unwrap(),
            "--out",
            dir.join("stats").to_str().unwrap(),
        ],
        dir,
    );
    assert_exit(&out, 0);
    let stats: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("stats/stats.json")).unwrap()).unwrap();
    assert_eq!(stats["total"], 0);
}

#[test]
fn strict_stats_fail_on_missing_image_naming_id() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("m.csv"), "id,boneage,male\nghost,12,True\n").unwrap();
    let out = baa(
        &[
            "stats",
            "--csv",
            dir.join("m.csv").to_str().unwrap(),
            "--images",
            dir.to_str().unwrap(),
            "--out",
            dir.join("stats").to_str().unwrap(),
            "--strict",
        ],
        dir,
    );
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost"));
}

#[test]
fn malformed_row_names_line_and_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("m.csv"), "id,boneage,male\na,12,True\nb,abc,True\n").unwrap();
    let out = baa(
        &[
            "stats",
            "--csv",
            dir.join("m.csv").to_str().unwrap(),
            "--images",
            dir.to_str().unwrap(),
            "--out",
            dir.join("stats").to_str().unwrap(),
        ],
        dir,
    );
    assert_exit(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 3"), "stderr: {stderr}");
}

#[test]
fn unknown_config_key_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("cfg.json"), r#"{"learning_rate": 0.5}"#).unwrap();
    let out = baa(
        &["train", "--config", dir.join("cfg.json").to_str().unwrap()],
        dir,
    );
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = synth(dir, 24, 11);
    let cfg = serde_json::json!({
        "csv": data.join("manifest.csv"),
        "images": data,
        "out": dir.join("runs"),
        "backbone": "tiny_test",
        "regime": "full",
        "epochs": 9,
        "patience": 9,
        "batch_size": 8,
        "lr": 0.5,
        "seed": 1,
        "train_size": 12, "val_size": 6, "test_size": 6,
        "dropout_rate": 0.0,
    });
    fs::write(dir.join("cfg.json"), serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    // The --epochs flag must beat the file's 9.
    let out = baa(
        &[
            "train",
            "--config",
            dir.join("cfg.json").to_str().unwrap(),
            "--epochs",
            "2",
        ],
        dir,
    );
    assert_exit(&out, 0);
    let eff: serde_json::Value = serde_json::from_slice(
        &fs::read(dir.join("runs/tiny_test_full/effective_config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(eff["epochs"], 2);
    let hist: serde_json::Value = serde_json::from_slice(
        &fs::read(dir.join("runs/tiny_test_full/history.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(hist["records"].as_array().unwrap().len(), 2);
    assert_eq!(hist["config"]["epochs"], 2);
}

#[test]
fn default_protocol_echoed_into_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = synth(dir, 32, 13);
    let out = baa(
        &[
            "train",
            "--csv",
            data.join("manifest.csv").to_str().unwrap(),
            "--images",
            data.to_str().unwrap(),
            "--out",
            dir.join("runs").to_str().unwrap(),
            "--backbone",
            "tiny_test",
            "--train-size",
            "16",
            "--val-size",
            "8",
            "--test-size",
            "8",
        ],
        dir,
    );
    assert_exit(&out, 0);
    let eff: serde_json::Value = serde_json::from_slice(
        &fs::read(dir.join("runs/tiny_test_full/effective_config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(eff["epochs"], 15);
    assert_eq!(eff["patience"], 10);
    assert_eq!(eff["batch_size"], 32);
    assert_eq!(eff["lr"], 1e-3);
}

#[test]
fn oversized_split_request_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = synth(dir, 8, 17);
    // Default split sizes (6000/2000/200) cannot come out of 8 records.
    let out = baa(
        &[
            "train",
            "--csv",
            data.join("manifest.csv").to_str().unwrap(),
            "--images",
            data.to_str().unwrap(),
            "--backbone",
            "tiny_test",
        ],
        dir,
    );
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("split sizes"));
}

#[test]
fn sidecar_backbone_mismatch_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = synth(dir, 32, 19);
    let run = train_quick(dir, &data, "full", 5);
    // Tamper: rewrite the sidecar to claim a different backbone.
    let sidecar_path = run.join("checkpoint.json");
    let mut sidecar: serde_json::Value =
        serde_json::from_slice(&fs::read(&sidecar_path).unwrap()).unwrap();
    sidecar["backbone_id"] = serde_json::json!("vgg16");
    fs::write(&sidecar_path, serde_json::to_vec_pretty(&sidecar).unwrap()).unwrap();

    let out = baa(
        &[
            "evaluate",
            "--checkpoint",
            run.join("checkpoint.baaw").to_str().unwrap(),
            "--config",
            run.join("effective_config.json").to_str().unwrap(),
        ],
        dir,
    );
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));
}

#[test]
fn duplicate_compare_pair_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = synth(dir, 32, 23);
    let run = train_quick(dir, &data, "full", 7);
    let out = baa(
        &[
            "evaluate",
            "--checkpoint",
            run.join("checkpoint.baaw").to_str().unwrap(),
            "--config",
            run.join("effective_config.json").to_str().unwrap(),
        ],
        dir,
    );
    assert_exit(&out, 0);
    let out = baa(
        &[
            "compare",
            run.to_str().unwrap(),
            run.to_str().unwrap(),
            "--out",
            dir.join("cmp").to_str().unwrap(),
        ],
        dir,
    );
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate"));
}

#[test]
fn single_run_compare_produces_single_cell_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = synth(dir, 32, 29);
    let run = train_quick(dir, &data, "frozen", 9);
    let out = baa(
        &[
            "evaluate",
            "--checkpoint",
            run.join("checkpoint.baaw").to_str().unwrap(),
            "--config",
            run.join("effective_config.json").to_str().unwrap(),
        ],
        dir,
    );
    assert_exit(&out, 0);
    let out = baa(
        &[
            "compare",
            run.to_str().unwrap(),
            "--out",
            dir.join("cmp").to_str().unwrap(),
        ],
        dir,
    );
    assert_exit(&out, 0);
    let table: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("cmp/comparison.json")).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 1);
    assert_eq!(table["best_cell"]["regime"], "frozen");
}

#[test]
fn divergent_training_exits_3_with_partial_history() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = synth(dir, 16, 31);
    let out = baa(
        &[
            "train",
            "--csv",
            data.join("manifest.csv").to_str().unwrap(),
            "--images",
            data.to_str().unwrap(),
            "--out",
            dir.join("runs").to_str().unwrap(),
            "--backbone",
            "tiny_test",
            "--epochs",
            "5",
            "--batch-size",
            "16",
            "--lr",
            "1e200",
            "--train-size",
            "8",
            "--val-size",
            "4",
            "--test-size",
            "4",
            "--dropout-rate",
            "0",
        ],
        dir,
    );
    assert_exit(&out, 3);
    assert!(dir.join("runs/tiny_test_full/history.json").is_file());
}

#[test]
fn unknown_backbone_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = synth(dir, 8, 37);
    let out = baa(
        &[
            "train",
            "--csv",
            data.join("manifest.csv").to_str().unwrap(),
            "--images",
            data.to_str().unwrap(),
            "--backbone",
            "resnet50",
            "--train-size",
            "4",
            "--val-size",
            "2",
            "--test-size",
            "2",
        ],
        dir,
    );
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("resnet50"));
}

#[test]
fn imagenet_backbone_without_weights_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = synth(dir, 8, 41);
    let out = Command::new(env!("CARGO_BIN_EXE_baa"))
        .args([
            "train",
            "--csv",
            data.join("manifest.csv").to_str().unwrap(),
            "--images",
            data.to_str().unwrap(),
            "--backbone",
            "mobilenet",
            "--weights-dir",
            dir.join("no_weights_here").to_str().unwrap(),
            "--train-size",
            "4",
            "--val-size",
            "2",
            "--test-size",
            "2",
        ])
        .current_dir(dir)
        .env_remove("BAA_WEIGHTS_DIR")
        .output()
        .unwrap();
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unavailable"));
}
