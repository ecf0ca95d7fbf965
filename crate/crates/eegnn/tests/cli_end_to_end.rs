//! Drives the compiled binary through its subcommands: artifact layout,
//! byte-level reproducibility, exit-code taxonomy, sweeps and extraction.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eegnn"))
}

fn write(path: &Path, contents: &str) {
    std::fs::write(path, contents).unwrap();
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SYNTH_SPEC: &str = r#"{
    "n_subjects": 4, "samples_per_subject": 12, "n_nodes": 4, "n_features": 3,
    "n_classes": 2, "class_separation": 2.0, "subject_shift": 0.3,
    "noise_std": 0.5, "seed": 17
}"#;

fn quick_config(dataset_dir: &Path) -> String {
    format!(
        r#"{{
        "dataset": {{"path": {:?}}},
        "task": {{"split": "intra"}},
        "model": {{"kind": "dgcnn", "hidden_dim": 4, "n_layers": 1}},
        "protocol": {{"kind": "cv", "k": 2}},
        "train": {{"learning_rate": 0.02, "dropout": 0.0, "batch_size": 24,
                   "max_epochs": 3, "seed": 9}}
    }}"#,
        dataset_dir.display()
    )
}

#[test]
fn synth_run_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    write(&spec, SYNTH_SPEC);
    let ds = dir.path().join("ds");
    run_ok(bin().args(["synth", "--spec"]).arg(&spec).arg("--out").arg(&ds));

    // Same spec twice: identical features.bin bytes.
    let ds2 = dir.path().join("ds2");
    run_ok(bin().args(["synth", "--spec"]).arg(&spec).arg("--out").arg(&ds2));
    assert_eq!(
        std::fs::read(ds.join("features.bin")).unwrap(),
        std::fs::read(ds2.join("features.bin")).unwrap()
    );

    let config = dir.path().join("config.json");
    write(&config, &quick_config(&ds));
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run_ok(bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_a));
    run_ok(bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_b));
    for artifact in ["results.json", "acc_matrix.csv"] {
        assert_eq!(
            std::fs::read(out_a.join(artifact)).unwrap(),
            std::fs::read(out_b.join(artifact)).unwrap(),
            "{artifact} differs between reruns"
        );
    }
    // run_meta records the resolved per-task regularization (intra-2 -> 0.001).
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_a.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["resolved_config"]["train"]["l1_coef"], 0.001);
    assert_eq!(meta["resolved_config"]["train"]["l2_coef"], 0.001);
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    write(
        &config,
        r#"{"task": {"split": "intra"}, "model": {"kind": "dgcnn"},
            "train": {"dropout": 1.5}}"#,
    );
    let out = bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("train.dropout"), "stderr: {stderr}");
}

#[test]
fn missing_dataset_exits_with_code_three_and_no_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    write(
        &config,
        r#"{"dataset": {"path": "/nonexistent/nowhere"},
            "task": {"split": "intra"}, "model": {"kind": "dgcnn"},
            "protocol": {"kind": "cv", "k": 2},
            "train": {"max_epochs": 1}}"#,
    );
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(!out_dir.join("results.json").exists());
}

#[test]
fn divergent_training_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    write(&spec, SYNTH_SPEC);
    let ds = dir.path().join("ds");
    run_ok(bin().args(["synth", "--spec"]).arg(&spec).arg("--out").arg(&ds));
    let config = dir.path().join("config.json");
    write(
        &config,
        &format!(
            r#"{{"dataset": {{"path": {:?}}},
                "task": {{"split": "intra"}},
                "model": {{"kind": "dgcnn", "hidden_dim": 4, "n_layers": 1}},
                "protocol": {{"kind": "cv", "k": 2}},
                "train": {{"learning_rate": 1e300, "optimizer": "sgd",
                           "dropout": 0.0, "batch_size": 8, "max_epochs": 4,
                           "l1_coef": 0.0, "l2_coef": 0.0, "seed": 1}}}}"#,
            ds.display()
        ),
    );
    let out = bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(4),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn grid_warning_reaches_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    write(&spec, SYNTH_SPEC);
    let ds = dir.path().join("ds");
    run_ok(bin().args(["synth", "--spec"]).arg(&spec).arg("--out").arg(&ds));
    let config = dir.path().join("config.json");
    write(
        &config,
        &format!(
            r#"{{"dataset": {{"path": {:?}}},
                "task": {{"split": "intra"}},
                "model": {{"kind": "dgcnn", "hidden_dim": 4, "n_layers": 1}},
                "protocol": {{"kind": "cv", "k": 2,
                              "grid": {{"learning_rate": [0.01]}}}},
                "train": {{"learning_rate": 0.02, "dropout": 0.0,
                           "batch_size": 24, "max_epochs": 2, "seed": 9}}}}"#,
            ds.display()
        ),
    );
    let out = run_ok(bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out")));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("grid"), "stderr: {stderr}");
}

#[test]
fn sweep_writes_one_row_per_value_and_dedupes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    write(&spec, SYNTH_SPEC);
    let ds = dir.path().join("ds");
    run_ok(bin().args(["synth", "--spec"]).arg(&spec).arg("--out").arg(&ds));
    let config = dir.path().join("config.json");
    write(&config, &quick_config(&ds));
    let out_dir = dir.path().join("sweep");
    let out = run_ok(bin()
        .args(["sweep", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .args(["--axis", "learning_rate", "--values", "0.0001,0.001,0.01,0.001"]));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("duplicate"), "stderr: {stderr}");

    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4, "header + 3 deduplicated rows: {csv}");
    assert!(rows[0].starts_with("value,"));
    for row in &rows[1..] {
        assert!(row.ends_with(",ok"), "row {row} not ok");
    }
    // Each cell directory holds a full run.
    assert!(out_dir.join("cell_0").join("results.json").exists());
}

#[test]
fn extract_produces_features_matching_meta() {
    let dir = tempfile::tempdir().unwrap();
    let rec_dir = dir.path().join("rec");
    std::fs::create_dir_all(&rec_dir).unwrap();
    let fs_hz = 64.0;
    let n_t = 64 * 3;
    let n_ch = 2;
    write(
        &rec_dir.join("recording.json"),
        &format!(r#"{{"fs_hz": {fs_hz}, "n_channels": {n_ch}, "n_timesteps": {n_t}}}"#),
    );
    let mut blob = Vec::new();
    for c in 0..n_ch {
        for i in 0..n_t {
            let v = (2.0 * std::f64::consts::PI * 10.0 * i as f64 / fs_hz).sin()
                * (1.0 + c as f64);
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(rec_dir.join("signal.bin"), blob).unwrap();

    let out_dir = dir.path().join("features");
    run_ok(bin()
        .args(["extract", "--recording"])
        .arg(&rec_dir)
        .arg("--out")
        .arg(&out_dir)
        .args(["--window-sec", "1.0", "--smooth"]));
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("extract_meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["n_windows"], 3);
    assert_eq!(meta["n_channels"], 2);
    assert_eq!(meta["n_bands"], 5);
    assert_eq!(meta["smoothed"], true);
    let features = std::fs::read(out_dir.join("features.bin")).unwrap();
    assert_eq!(features.len(), 3 * 2 * 5 * 4);
}

#[test]
fn ncv_jobs_flag_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    write(&spec, SYNTH_SPEC);
    let ds = dir.path().join("ds");
    run_ok(bin().args(["synth", "--spec"]).arg(&spec).arg("--out").arg(&ds));
    let config = dir.path().join("config.json");
    write(
        &config,
        &format!(
            r#"{{"dataset": {{"path": {:?}}},
                "task": {{"split": "cross"}},
                "model": {{"kind": "dgcnn", "hidden_dim": 4, "n_layers": 1}},
                "protocol": {{"kind": "ncv", "k": 2, "k_inner": 2,
                              "grid": {{"learning_rate": [0.01, 0.02],
                                        "hidden_dim": [4]}}}},
                "train": {{"learning_rate": 0.01, "dropout": 0.0,
                           "batch_size": 24, "max_epochs": 2, "seed": 9}}}}"#,
            ds.display()
        ),
    );
    let serial = dir.path().join("serial");
    let parallel = dir.path().join("parallel");
    run_ok(bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&serial)
        .args(["--jobs", "1"]));
    run_ok(bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&parallel)
        .args(["--jobs", "4"]));
    assert_eq!(
        std::fs::read(serial.join("results.json")).unwrap(),
        std::fs::read(parallel.join("results.json")).unwrap()
    );
}
