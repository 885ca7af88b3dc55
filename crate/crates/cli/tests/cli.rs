//! End-to-end checks of the command-line surface: exit codes, artifact
//! layout, strict config handling, override propagation, determinism.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clipsparse"))
}

fn write_tiny_config(path: &Path) {
    let config = r#"{
  "seed": 5,
  "task": "retrieval",
  "model": {"frame_size": 16, "cnn_channels": [8], "hidden_dim": 16, "layers": 1,
            "heads": 2, "vocab_size": 64, "max_text_len": 8, "num_answers": 12},
  "data": {"kind": "video", "train_examples": 8, "val_examples": 4, "test_examples": 4,
           "fps": 8, "duration_seconds": 2, "frame_size": 16},
  "sampling": {"clip_seconds": 1.0, "train_clips": 2, "test_clips": 2,
               "frames_per_clip": 1, "strategy": "sparse_random"},
  "total_steps": 3,
  "batch_size": 2,
  "eval_every": 0,
  "log_every": 1
}"#;
    std::fs::write(path, config).unwrap();
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawning the binary")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn gen_data_writes_dataset_and_frozen_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write_tiny_config(&cfg);
    let data = dir.path().join("data");
    let out = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert_ok(&out);
    assert!(data.join("manifest.json").exists());
    assert!(data.join("records.bin").exists());
    assert!(data.join("config.json").exists());
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, r#"{"seed": 1, "learning_rate_typo": 3}"#).unwrap();
    let out = run(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("learning_rate_typo"), "stderr: {stderr}");
}

#[test]
fn eval_without_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write_tiny_config(&cfg);
    let out = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_dir_without_env_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write_tiny_config(&cfg);
    let out = bin()
        .args([
            "finetune",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ])
        .env_remove("CLIPSPARSE_DATA_DIR")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_dir_falls_back_to_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write_tiny_config(&cfg);
    let data = dir.path().join("data");
    assert_ok(&run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]));
    let out = bin()
        .args([
            "finetune",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join("run").to_str().unwrap(),
        ])
        .env("CLIPSPARSE_DATA_DIR", data.to_str().unwrap())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn finetune_writes_all_artifacts_and_set_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write_tiny_config(&cfg);
    let data = dir.path().join("data");
    assert_ok(&run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]));
    let rundir = dir.path().join("run");
    let out = run(&[
        "finetune",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        rundir.to_str().unwrap(),
        "--set",
        "total_steps=2",
        "--set",
        "optimizer.lr=0.0005",
    ]);
    assert_ok(&out);
    for f in ["config.json", "model.ckpt", "report.json", "report.csv", "log.jsonl"] {
        assert!(rundir.join(f).exists(), "{f} missing");
    }
    // overrides land in the frozen copy
    let frozen: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(rundir.join("config.json")).unwrap()).unwrap();
    assert_eq!(frozen["total_steps"], 2);
    assert_eq!(frozen["optimizer"]["lr"], 0.0005);
    // log has one line per step
    let log = std::fs::read_to_string(rundir.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write_tiny_config(&cfg);
    let checks = |tag: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let data = dir.path().join(format!("data.{tag}"));
        assert_ok(&run(&[
            "gen-data", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap(),
            "--set", "seed=7",
        ]));
        let rundir = dir.path().join(format!("run.{tag}"));
        assert_ok(&run(&[
            "finetune",
            "--config", cfg.to_str().unwrap(),
            "--data", data.to_str().unwrap(),
            "--out", rundir.to_str().unwrap(),
            "--set", "seed=7",
        ]));
        (
            std::fs::read(data.join("records.bin")).unwrap(),
            std::fs::read(rundir.join("model.ckpt")).unwrap(),
            std::fs::read(rundir.join("report.json")).unwrap(),
        )
    };
    let (d1, c1, r1) = checks("a");
    let (d2, c2, r2) = checks("b");
    assert_eq!(d1, d2, "datasets differ");
    assert_eq!(c1, c2, "checkpoints differ");
    assert_eq!(r1, r2, "reports differ");
}

#[test]
fn ablate_writes_one_report_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write_tiny_config(&cfg);
    let data = dir.path().join("data");
    assert_ok(&run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]));
    let sweep = dir.path().join("sweep");
    let out = run(&[
        "ablate",
        "--config", cfg.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--axis", "n_train",
        "--values", "1,2,4",
        "--out", sweep.to_str().unwrap(),
        "--set", "total_steps=1",
    ]);
    assert_ok(&out);
    for v in ["1", "2", "4"] {
        let point = sweep.join(format!("n_train={v}"));
        assert!(point.join("report.json").exists(), "missing report for {v}");
        let frozen: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(point.join("config.json")).unwrap())
                .unwrap();
        assert_eq!(frozen["sampling"]["train_clips"].to_string(), v);
    }
}

#[test]
fn ablate_parallel_workers_match_sequential_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write_tiny_config(&cfg);
    let data = dir.path().join("data");
    assert_ok(&run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]));
    let run_sweep = |tag: &str, workers: &str| -> Vec<u8> {
        let sweep = dir.path().join(format!("sweep.{tag}"));
        assert_ok(&run(&[
            "ablate",
            "--config", cfg.to_str().unwrap(),
            "--data", data.to_str().unwrap(),
            "--axis", "n_train",
            "--values", "1,2",
            "--out", sweep.to_str().unwrap(),
            "--workers", workers,
            "--set", "total_steps=1",
        ]));
        std::fs::read(sweep.join("n_train=2/model.ckpt")).unwrap()
    };
    assert_eq!(run_sweep("seq", "1"), run_sweep("par", "2"));
}

#[test]
fn bench_writes_csv_with_status_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write_tiny_config(&cfg);
    let out_dir = dir.path().join("bench");
    let out = run(&[
        "bench",
        "--config", cfg.to_str().unwrap(),
        "--axis", "clips",
        "--values", "1,2",
        "--out", out_dir.to_str().unwrap(),
        "--set", "batch_size=1",
    ]);
    assert_ok(&out);
    let csv = std::fs::read_to_string(out_dir.join("bench.csv")).unwrap();
    assert!(csv.starts_with("axis_value,batch,wall_ms_median,peak_bytes,status"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn finetune_rejects_pretrain_task() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write_tiny_config(&cfg);
    let out = run(&[
        "finetune",
        "--config", cfg.to_str().unwrap(),
        "--data", dir.path().to_str().unwrap(),
        "--out", dir.path().join("o").to_str().unwrap(),
        "--set", "task=\"pretrain\"",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
