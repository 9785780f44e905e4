//! End-to-end tests of the `tmil` binary: synthesize → train → eval round
//! trips on tiny marker-image fixtures, exit-code contracts, and
//! byte-determinism of artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use targeted_mil::model::{ModelHyper, TargetedMILModel};
use targeted_mil::train::{save_checkpoint, CheckpointModel};

/// Big-endian IDX image file (magic 0x803).
fn idx_images(images: &[[u8; 4]]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&2u32.to_be_bytes());
    out.extend_from_slice(&2u32.to_be_bytes());
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

/// Big-endian IDX label file (magic 0x801).
fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// 2×2 marker images: class 1 lights pixel 0, class 0 lights pixel 1 with
/// slight per-image variation. Linearly separable on pixel 0.
fn marker_pool(n_per_class: usize) -> (Vec<[u8; 4]>, Vec<u8>) {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n_per_class {
        images.push([255, (10 * (i % 5)) as u8, 0, 0]);
        labels.push(1);
        images.push([0, 100 + (5 * (i % 10)) as u8, 30, 0]);
        labels.push(0);
    }
    (images, labels)
}

/// Writes marker IDX files under `dir/data` using the conventional names.
fn write_marker_idx(dir: &Path) {
    let data = dir.join("data");
    std::fs::create_dir_all(&data).unwrap();
    let (train_imgs, train_labels) = marker_pool(40);
    let (test_imgs, test_labels) = marker_pool(20);
    std::fs::write(
        data.join("train-images-idx3-ubyte"),
        idx_images(&train_imgs),
    )
    .unwrap();
    std::fs::write(data.join("train-labels-idx1-ubyte"), idx_labels(&train_labels)).unwrap();
    std::fs::write(data.join("t10k-images-idx3-ubyte"), idx_images(&test_imgs)).unwrap();
    std::fs::write(data.join("t10k-labels-idx1-ubyte"), idx_labels(&test_labels)).unwrap();
}

/// A config whose [dataset] section names the marker files explicitly with
/// config-relative paths.
fn base_dataset_section() -> String {
    r#"
[dataset]
train_images = "data/train-images-idx3-ubyte"
train_labels = "data/train-labels-idx1-ubyte"
test_images = "data/t10k-images-idx3-ubyte"
test_labels = "data/t10k-labels-idx1-ubyte"
target_class = 1
n_bags = 20
n_test_bags = 8
mean_size = 6.0
std_size = 1.0
witness_rate = 0.25
seed = 11
"#
    .to_string()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn tmil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmil"))
        .args(args)
        .env_remove("TMIL_DATA_DIR")
        .output()
        .unwrap()
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

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// Synthesizes the marker bags into `dir` and returns the config path.
fn synthesized_markers(dir: &Path, extra_sections: &str) -> PathBuf {
    write_marker_idx(dir);
    let config = write_config(
        dir,
        "run.toml",
        &format!("{}{extra_sections}", base_dataset_section()),
    );
    let out = tmil(&["synthesize", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 0);
    config
}

#[test]
fn synthesize_writes_deterministic_datasets() {
    let dir = tempfile::tempdir().unwrap();
    write_marker_idx(dir.path());
    let config = write_config(dir.path(), "run.toml", &base_dataset_section());
    let out = tmil(&["synthesize", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 0);
    let stdout = stdout_of(&out);
    assert!(stdout.contains("20 bags"), "stdout: {stdout}");
    assert!(stdout.contains("8 bags"), "stdout: {stdout}");

    let train_path = dir.path().join("bags-train.tmilds");
    let test_path = dir.path().join("bags-test.tmilds");
    let first_train = std::fs::read(&train_path).unwrap();
    let first_test = std::fs::read(&test_path).unwrap();

    let rerun = tmil(&["synthesize", "--config", config.to_str().unwrap()]);
    assert_exit(&rerun, 0);
    assert_eq!(std::fs::read(&train_path).unwrap(), first_train);
    assert_eq!(std::fs::read(&test_path).unwrap(), first_test);

    // A different seed changes the bytes.
    let reseeded = tmil(&[
        "synthesize",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    assert_exit(&reseeded, 0);
    assert_ne!(std::fs::read(&train_path).unwrap(), first_train);
}

#[test]
fn synthesize_rejects_out_of_range_witness_rate() {
    let dir = tempfile::tempdir().unwrap();
    write_marker_idx(dir.path());
    let body = base_dataset_section().replace("witness_rate = 0.25", "witness_rate = 1.5");
    let config = write_config(dir.path(), "run.toml", &body);
    let out = tmil(&["synthesize", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 2);
    assert!(stderr_of(&out).contains("witness_rate"));
}

#[test]
fn synthesize_falls_back_to_tmil_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    write_marker_idx(dir.path());
    let body = r#"
[dataset]
target_class = 1
n_bags = 5
n_test_bags = 3
mean_size = 4.0
std_size = 0.5
witness_rate = 0.3
"#;
    let config = write_config(dir.path(), "run.toml", body);

    // Without the env var and without explicit paths: config error.
    let missing = tmil(&["synthesize", "--config", config.to_str().unwrap()]);
    assert_exit(&missing, 2);
    assert!(stderr_of(&missing).contains("TMIL_DATA_DIR"));

    let found = Command::new(env!("CARGO_BIN_EXE_tmil"))
        .args(["synthesize", "--config", config.to_str().unwrap()])
        .env("TMIL_DATA_DIR", dir.path().join("data"))
        .output()
        .unwrap();
    assert_exit(&found, 0);
    assert!(dir.path().join("bags-train.tmilds").exists());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", "[model]\nlatent = 3\n");
    let out = tmil(&["train", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 2);
    assert!(stderr_of(&out).contains("latent"));
}

#[test]
fn missing_config_flag_is_a_usage_error() {
    let out = tmil(&["eval"]);
    assert_exit(&out, 2);
}

#[test]
fn train_missing_dataset_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{}\ntrain_path = \"nowhere.tmilds\"\n", base_dataset_section());
    let config = write_config(dir.path(), "run.toml", &body);
    let out = tmil(&["train", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 2);
}

#[test]
fn train_eval_round_trip_with_deterministic_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = synthesized_markers(
        dir.path(),
        "\n[model]\nd = 2\n\n[train]\nepochs = 2\nseed = 3\n",
    );
    let config = config.to_str().unwrap();

    let out = tmil(&["train", "--config", config]);
    assert_exit(&out, 0);
    assert!(stdout_of(&out).contains("final mean_total="));
    let ckpt_path = dir.path().join("model.tmilckpt");
    let history_path = dir.path().join("history.csv");
    let first_ckpt = std::fs::read(&ckpt_path).unwrap();
    let first_history = std::fs::read(&history_path).unwrap();
    let history = String::from_utf8(first_history.clone()).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,mean_total,mean_recon,mean_kl,mean_cls");
    assert_eq!(lines.len(), 3);

    // Identical seeds and config: identical bytes.
    let rerun = tmil(&["train", "--config", config]);
    assert_exit(&rerun, 0);
    assert_eq!(std::fs::read(&ckpt_path).unwrap(), first_ckpt);
    assert_eq!(std::fs::read(&history_path).unwrap(), first_history);

    let eval = tmil(&["eval", "--config", config]);
    assert_exit(&eval, 0);
    let stdout = stdout_of(&eval);
    assert!(stdout.contains("instance: f_score="), "stdout: {stdout}");
    assert!(stdout.contains("bag: f_score="), "stdout: {stdout}");
    let report = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(rows[0], "level,threshold,precision,recall,f_score,auc_pr,tp,fp,tn,fn");
    assert!(rows[1].starts_with("instance,0.5,"));
    assert!(rows[2].starts_with("bag,0.5,"));
}

#[test]
fn train_baseline_checkpoint_evaluates_via_eval_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = synthesized_markers(
        dir.path(),
        "\n[train]\nepochs = 1\n\n[eval]\ncheckpoint = \"baseline.tmilckpt\"\n",
    );
    let config = config.to_str().unwrap();
    let out = tmil(&["train-baseline", "--config", config]);
    assert_exit(&out, 0);
    assert!(dir.path().join("baseline.tmilckpt").exists());
    assert!(dir.path().join("baseline-history.csv").exists());

    // [eval].checkpoint points at the baseline; no latent-dim check applies.
    let eval = tmil(&["eval", "--config", config]);
    assert_exit(&eval, 0);
    assert!(stdout_of(&eval).contains("instance: f_score="));
}

#[test]
fn eval_rejects_latent_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let config = synthesized_markers(dir.path(), "\n[model]\nd = 2\n\n[train]\nepochs = 1\n");
    let out = tmil(&["train", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 0);

    let mismatched = write_config(
        dir.path(),
        "mismatch.toml",
        &format!("{}\n[model]\nd = 3\n", base_dataset_section()),
    );
    let eval = tmil(&["eval", "--config", mismatched.to_str().unwrap()]);
    assert_exit(&eval, 2);
    assert!(stderr_of(&eval).contains("latent dimension mismatch"));
}

#[test]
fn eval_oracle_checkpoint_prints_perfect_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = synthesized_markers(dir.path(), "\n[model]\nd = 1\n");

    // Handcrafted scorer: posterior mean ≈ 10·pixel0, classifier cuts at
    // 5.5, so marker targets score ≈ 0.99 and the rest ≈ 0.01.
    let mut model = TargetedMILModel::zeroed(ModelHyper {
        m: 4,
        d: 1,
        alpha: 1.0,
        decoder_noise_var: 0.1,
    })
    .unwrap();
    for (name, tensor) in TargetedMILModel::param_names()
        .iter()
        .zip(model.params_mut())
    {
        match *name {
            "enc.l1.w" => tensor.data_mut()[0] = 10.0,
            "enc.l2.w" => tensor.data_mut()[0] = 1.0,
            "enc.mean.w" => tensor.data_mut()[0] = 1.0,
            "cls.w" => tensor.data_mut()[0] = 1.0,
            "cls.b" => tensor.data_mut()[0] = -5.5,
            _ => {}
        }
    }
    save_checkpoint(
        &CheckpointModel::Targeted(model),
        &dir.path().join("model.tmilckpt"),
    )
    .unwrap();

    let eval = tmil(&["eval", "--config", config.to_str().unwrap()]);
    assert_exit(&eval, 0);
    let stdout = stdout_of(&eval);
    assert!(
        stdout.contains("instance: f_score=1 auc_pr=1"),
        "stdout: {stdout}"
    );
    assert!(stdout.contains("bag: f_score=1 auc_pr=1"), "stdout: {stdout}");
}

#[test]
fn reconstruct_untrained_model_writes_uniform_gray_grid() {
    let dir = tempfile::tempdir().unwrap();
    let config = synthesized_markers(
        dir.path(),
        "\n[train]\nepochs = 0\n\n[reconstruct]\nrows = 2\ncols = 2\nout = \"grid.pgm\"\n",
    );
    let config = config.to_str().unwrap();
    let trained = tmil(&["train", "--config", config]);
    assert_exit(&trained, 0);

    let out = tmil(&["reconstruct", "--config", config]);
    assert_exit(&out, 0);
    let originals = dir.path().join("grid-originals.pgm");
    let reconstructions = dir.path().join("grid-reconstructions.pgm");
    assert!(originals.exists());
    let bytes = std::fs::read(&reconstructions).unwrap();
    let header = b"P5\n4 4\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    // Zero-initialized output heads decode to logistic(0) = 0.5 → byte 128.
    assert_eq!(bytes[header.len()..], [128u8; 16]);
}

#[test]
fn sweep_flag_values_produce_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let config = synthesized_markers(dir.path(), "\n[train]\nepochs = 1\n");
    let config = config.to_str().unwrap();
    let out = tmil(&[
        "sweep",
        "--config",
        config,
        "--axis",
        "bag_size",
        "--values",
        "4",
    ]);
    assert_exit(&out, 0);
    let report = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(rows[0], "axis,axis_value,mean_auc_pr,std_auc_pr,runs");
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("bag_size,4,"));

    let two = tmil(&[
        "sweep",
        "--config",
        config,
        "--axis",
        "bag_size",
        "--values",
        "6,4",
        "--out",
        dir.path().join("sweep2.csv").to_str().unwrap(),
    ]);
    assert_exit(&two, 0);
    let report = std::fs::read_to_string(dir.path().join("sweep2.csv")).unwrap();
    let rows: Vec<&str> = report.lines().collect();
    assert_eq!(rows.len(), 3);
    // Values are swept in ascending order.
    assert!(rows[1].starts_with("bag_size,4,"));
    assert!(rows[2].starts_with("bag_size,6,"));
}

#[test]
fn sweep_without_axis_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = synthesized_markers(dir.path(), "");
    let out = tmil(&["sweep", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 2);
    assert!(stderr_of(&out).contains("axis"));
}

#[test]
fn identifiability_micro_run_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"
[identifiability]
d = 1
k_groups = 3
bags_per_group = 5
bag_size = 4
identity_mixing = true
epochs = 1
"#;
    let config = write_config(dir.path(), "ident.toml", body);
    let out = tmil(&["identifiability", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 0);
    let stdout = stdout_of(&out);
    assert!(stdout.contains("mcc="), "stdout: {stdout}");
    let report = std::fs::read_to_string(dir.path().join("identifiability.csv")).unwrap();
    assert!(report.starts_with("mcc,shuffled_mcc,n_instances,e_matrix_cond,final_mean_total\n"));
    assert!(report.lines().nth(1).unwrap().contains(",60,"));
}

#[test]
fn identifiability_with_too_few_groups_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"
[identifiability]
d = 2
k_groups = 2
bags_per_group = 5
bag_size = 4
epochs = 1
"#;
    let config = write_config(dir.path(), "ident.toml", body);
    let out = tmil(&["identifiability", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 2);
    assert!(stderr_of(&out).contains("k_groups"));
}
