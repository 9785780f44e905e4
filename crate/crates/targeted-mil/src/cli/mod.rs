//! Config-file-driven commands wiring bag synthesis, training, evaluation,
//! sweeps, and reconstruction export into reproducible runs.
//!
//! Every command reads one TOML file (`--config PATH`). Relative paths in
//! the config resolve against the config file's directory, so a run is
//! reproducible from any working directory; `--out` and other flags are
//! taken as typed. Unknown config keys are hard errors.
//!
//! Schema (all sections optional unless a command needs them; every field
//! shown with its default where one exists):
//!
//! ```toml
//! [dataset]
//! train_images = "…"          # default: $TMIL_DATA_DIR/train-images-idx3-ubyte[.gz]
//! train_labels = "…"          # default: $TMIL_DATA_DIR/train-labels-idx1-ubyte[.gz]
//! test_images = "…"           # default: $TMIL_DATA_DIR/t10k-images-idx3-ubyte[.gz]
//! test_labels = "…"           # default: $TMIL_DATA_DIR/t10k-labels-idx1-ubyte[.gz]
//! target_class = 9
//! n_bags = 500
//! n_test_bags = 100
//! mean_size = 50.0
//! std_size = 10.0
//! witness_rate = 0.1
//! positive_fraction = 0.5
//! seed = 0
//! train_path = "bags-train.tmilds"
//! test_path = "bags-test.tmilds"
//!
//! [model]
//! d = 32
//! alpha = 1.0
//! noise_var = 0.1
//!
//! [train]
//! epochs = 100
//! learning_rate = 0.001
//! seed = 0
//! shuffle = true
//! log_every = 100
//! checkpoint = "model.tmilckpt"
//! history = "history.csv"
//! baseline_checkpoint = "baseline.tmilckpt"
//! baseline_history = "baseline-history.csv"
//!
//! [eval]
//! tau = 0.5
//! report = "metrics.csv"
//! checkpoint = "…"            # default: [train].checkpoint
//!
//! [sweep]
//! axis = "bag_size"           # or "witness_rate"; --axis overrides
//! values = [10.0, 50.0]       # --values overrides
//! repeats = 1
//! epochs = 100                # default: [train].epochs
//! report = "sweep.csv"
//!
//! [reconstruct]
//! rows = 4
//! cols = 8
//! out = "grid.pgm"
//!
//! [identifiability]
//! d = 2
//! m = 2                       # default: d
//! k_groups = 5
//! bags_per_group = 500
//! bag_size = 8
//! noise_std = 0.01
//! seed = 0
//! identity_mixing = false
//! epochs = 30
//! learning_rate = 0.001
//! alpha = 0.0
//! noise_var = 0.01
//! train_seed = 0
//! report = "identifiability.csv"
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::{
    load_bags, make_bags, save_bags, BagDataset, DataError, GenerationConfig, InstancePool,
    Split,
};
use crate::eval::pgm::reconstruct_grid;
use crate::eval::{
    evaluate, run_identifiability, sweep, EvalError, IdentifiabilityConfig, SweepAxis, SweepSpec,
};
use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::train::{
    load_checkpoint, save_checkpoint, train, train_baseline, CheckpointModel, TrainConfig,
    TrainError, TrainHistory,
};

/// Command failure, classified by exit code: configuration/input errors
/// exit 2, numerical failures exit 3.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Numeric(_) => 3,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::NonFinite { .. } => Self::Numeric(e.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(n) => n.into(),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Numerics(n) => n.into(),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Self::Numeric(e.to_string()),
            TrainError::Numerics(n) => n.into(),
            TrainError::Model(m) => m.into(),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::AlignmentFailure(_) => Self::Numeric(e.to_string()),
            EvalError::Numerics(n) => n.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Train(t) => t.into(),
            EvalError::Data(d) => d.into(),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Config(format!("io: {e}"))
    }
}

/// Command-line overrides of config values; each command reads only the
/// fields its flags can set.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub target_class: Option<u8>,
    pub axis: Option<String>,
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetSection {
    train_images: Option<String>,
    train_labels: Option<String>,
    test_images: Option<String>,
    test_labels: Option<String>,
    target_class: u8,
    n_bags: usize,
    #[serde(default = "default_n_test_bags")]
    n_test_bags: usize,
    mean_size: f64,
    std_size: f64,
    witness_rate: f64,
    #[serde(default = "default_positive_fraction")]
    positive_fraction: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_train_path")]
    train_path: String,
    #[serde(default = "default_test_path")]
    test_path: String,
}

fn default_n_test_bags() -> usize {
    100
}

fn default_positive_fraction() -> f64 {
    0.5
}

fn default_train_path() -> String {
    "bags-train.tmilds".into()
}

fn default_test_path() -> String {
    "bags-test.tmilds".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    d: usize,
    alpha: f64,
    noise_var: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            d: t.d,
            alpha: t.alpha,
            noise_var: t.decoder_noise_var,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    epochs: usize,
    learning_rate: f64,
    seed: u64,
    shuffle: bool,
    log_every: usize,
    checkpoint: String,
    history: String,
    baseline_checkpoint: String,
    baseline_history: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            seed: t.seed,
            shuffle: t.shuffle,
            log_every: t.log_every,
            checkpoint: "model.tmilckpt".into(),
            history: "history.csv".into(),
            baseline_checkpoint: "baseline.tmilckpt".into(),
            baseline_history: "baseline-history.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalSection {
    tau: f64,
    report: String,
    checkpoint: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tau: 0.5,
            report: "metrics.csv".into(),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SweepSection {
    axis: Option<String>,
    values: Option<Vec<f64>>,
    repeats: usize,
    epochs: Option<usize>,
    report: String,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            axis: None,
            values: None,
            repeats: 1,
            epochs: None,
            report: "sweep.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ReconstructSection {
    rows: usize,
    cols: usize,
    out: String,
}

impl Default for ReconstructSection {
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 8,
            out: "grid.pgm".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct IdentifiabilitySection {
    d: usize,
    m: Option<usize>,
    k_groups: usize,
    bags_per_group: usize,
    bag_size: usize,
    #[serde(default = "default_noise_std")]
    noise_std: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    identity_mixing: bool,
    #[serde(default = "default_ident_epochs")]
    epochs: usize,
    #[serde(default = "default_learning_rate")]
    learning_rate: f64,
    #[serde(default)]
    alpha: f64,
    #[serde(default = "default_ident_noise_var")]
    noise_var: f64,
    #[serde(default)]
    train_seed: u64,
    #[serde(default = "default_ident_report")]
    report: String,
}

fn default_noise_std() -> f64 {
    0.01
}

fn default_ident_epochs() -> usize {
    30
}

fn default_learning_rate() -> f64 {
    TrainConfig::default().learning_rate
}

// The synthetic observations carry only noise_std-level noise (0.01 by
// default), so the likelihood variance is far tighter than the image
// default of 0.1; a loose likelihood visibly degrades latent recovery.
fn default_ident_noise_var() -> f64 {
    0.01
}

fn default_ident_report() -> String {
    "identifiability.csv".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: Option<DatasetSection>,
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    eval: EvalSection,
    sweep: Option<SweepSection>,
    #[serde(default)]
    reconstruct: ReconstructSection,
    identifiability: Option<IdentifiabilitySection>,
}

/// A loaded run configuration; see the module docs for the schema.
#[derive(Debug)]
pub struct RunConfig {
    raw: RawConfig,
    base: PathBuf,
}

const IDX_NAMES: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or_else(|| Path::new("")))
    }

    /// Parses config text with paths resolved against `base`.
    fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| config_err(format!("config: {e}")))?;
        Ok(Self {
            raw,
            base: base.to_path_buf(),
        })
    }

    fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn dataset(&self) -> Result<&DatasetSection, CliError> {
        self.raw
            .dataset
            .as_ref()
            .ok_or_else(|| config_err("config needs a [dataset] section for this command"))
    }

    /// IDX source path: the explicit config value, else the conventional
    /// file name under `TMIL_DATA_DIR` (gzipped variant preferred).
    fn idx_source(&self, explicit: Option<&str>, name: &str) -> Result<PathBuf, CliError> {
        if let Some(p) = explicit {
            return Ok(self.resolve(p));
        }
        let dir = std::env::var_os("TMIL_DATA_DIR").ok_or_else(|| {
            config_err(format!(
                "no path configured for {name} and TMIL_DATA_DIR is unset"
            ))
        })?;
        let dir = PathBuf::from(dir);
        let gz = dir.join(format!("{name}.gz"));
        if gz.exists() {
            return Ok(gz);
        }
        let plain = dir.join(name);
        if plain.exists() {
            return Ok(plain);
        }
        Err(config_err(format!(
            "neither {} nor {} exists",
            gz.display(),
            plain.display()
        )))
    }

    fn load_pool(&self, split: Split) -> Result<InstancePool, CliError> {
        let ds = self.dataset()?;
        let ((images, labels), (image_name, label_name)) = match split {
            Split::Train => ((&ds.train_images, &ds.train_labels), IDX_NAMES[0]),
            Split::Test => ((&ds.test_images, &ds.test_labels), IDX_NAMES[1]),
        };
        let images = self.idx_source(images.as_deref(), image_name)?;
        let labels = self.idx_source(labels.as_deref(), label_name)?;
        Ok(InstancePool::from_idx_files(&images, &labels, split)?)
    }

    fn train_config(&self, seed_override: Option<u64>) -> TrainConfig {
        TrainConfig {
            epochs: self.raw.train.epochs,
            learning_rate: self.raw.train.learning_rate,
            alpha: self.raw.model.alpha,
            d: self.raw.model.d,
            decoder_noise_var: self.raw.model.noise_var,
            seed: seed_override.unwrap_or(self.raw.train.seed),
            shuffle: self.raw.train.shuffle,
            log_every: self.raw.train.log_every,
        }
    }

    fn eval_checkpoint_path(&self) -> PathBuf {
        self.resolve(
            self.raw
                .eval
                .checkpoint
                .as_deref()
                .unwrap_or(&self.raw.train.checkpoint),
        )
    }
}

fn gen_config(ds: &DatasetSection, n_bags: usize, seed: u64) -> GenerationConfig {
    GenerationConfig {
        n_bags,
        mean_size: ds.mean_size,
        std_size: ds.std_size,
        witness_rate: ds.witness_rate,
        positive_fraction: ds.positive_fraction,
        seed,
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn write_artifact(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    ensure_parent(path)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

fn dataset_summary(set: &BagDataset) -> (usize, f64, f64) {
    let n = set.bags().len();
    let positives = set.bags().iter().filter(|b| b.bag_label() == 1).count();
    let sizes: usize = set.bags().iter().map(|b| b.n_instances()).sum();
    (n, positives as f64 / n as f64, sizes as f64 / n as f64)
}

/// Builds train and test bag datasets from the configured IDX pools and
/// writes them to `train_path` / `test_path`.
pub fn cmd_synthesize(cfg: &RunConfig, ov: &Overrides) -> Result<(), CliError> {
    let ds = cfg.dataset()?;
    let target = ov.target_class.unwrap_or(ds.target_class);
    let seed = ov.seed.unwrap_or(ds.seed);
    let sets = [
        (Split::Train, ds.n_bags, seed, &ds.train_path),
        (Split::Test, ds.n_test_bags, seed.wrapping_add(1), &ds.test_path),
    ];
    for (split, n_bags, seed, out) in sets {
        let pool = cfg.load_pool(split)?;
        let set = make_bags(&pool, target, &gen_config(ds, n_bags, seed))?;
        let path = cfg.resolve(out);
        ensure_parent(&path)?;
        save_bags(&set, &path)?;
        let (n, positive_fraction, mean_size) = dataset_summary(&set);
        println!(
            "wrote {}: {n} bags, positive_fraction={positive_fraction:.3}, mean_size={mean_size:.1}",
            path.display()
        );
    }
    Ok(())
}

/// Trains the targeted model on the `train_path` bags and writes the
/// checkpoint plus per-epoch history.
pub fn cmd_train(cfg: &RunConfig, ov: &Overrides) -> Result<(), CliError> {
    let ds = cfg.dataset()?;
    let data = load_bags(&cfg.resolve(&ds.train_path))?;
    let outcome = train(&data, &cfg.train_config(ov.seed))?;
    let ckpt = ov
        .out
        .clone()
        .unwrap_or_else(|| cfg.resolve(&cfg.raw.train.checkpoint));
    ensure_parent(&ckpt)?;
    save_checkpoint(&CheckpointModel::Targeted(outcome.model), &ckpt)?;
    let history = cfg.resolve(&cfg.raw.train.history);
    let mut buf = Vec::new();
    outcome.history.write_csv(&mut buf, false)?;
    write_artifact(&history, &buf)?;
    report_training(&ckpt, &history, &outcome.history);
    Ok(())
}

/// Trains the max-pooling baseline on the same bags and writes its
/// checkpoint plus history.
pub fn cmd_train_baseline(cfg: &RunConfig, ov: &Overrides) -> Result<(), CliError> {
    let ds = cfg.dataset()?;
    let data = load_bags(&cfg.resolve(&ds.train_path))?;
    let outcome = train_baseline(&data, &cfg.train_config(ov.seed))?;
    let ckpt = ov
        .out
        .clone()
        .unwrap_or_else(|| cfg.resolve(&cfg.raw.train.baseline_checkpoint));
    ensure_parent(&ckpt)?;
    save_checkpoint(&CheckpointModel::Baseline(outcome.model), &ckpt)?;
    let history = cfg.resolve(&cfg.raw.train.baseline_history);
    let mut buf = Vec::new();
    outcome.history.write_csv(&mut buf, false)?;
    write_artifact(&history, &buf)?;
    report_training(&ckpt, &history, &outcome.history);
    Ok(())
}

fn report_training(ckpt: &Path, history: &Path, trajectory: &TrainHistory) {
    println!("wrote checkpoint {}", ckpt.display());
    println!("wrote history {}", history.display());
    if let Some(total) = trajectory.final_mean_total() {
        println!("final mean_total={total}");
    }
}

/// Evaluates a checkpoint on the `test_path` bags at threshold τ and
/// writes the metrics report.
pub fn cmd_eval(cfg: &RunConfig, ov: &Overrides) -> Result<(), CliError> {
    let ds = cfg.dataset()?;
    let test = load_bags(&cfg.resolve(&ds.test_path))?;
    let tau = cfg.raw.eval.tau;
    let loaded = load_checkpoint(&cfg.eval_checkpoint_path())?;
    let report = match loaded {
        CheckpointModel::Targeted(_) => {
            let model = loaded.into_targeted_with_d(cfg.raw.model.d)?;
            evaluate(&model, test.bags(), tau)?
        }
        CheckpointModel::Baseline(baseline) => evaluate(&baseline, test.bags(), tau)?,
    };
    let path = ov
        .out
        .clone()
        .unwrap_or_else(|| cfg.resolve(&cfg.raw.eval.report));
    write_artifact(&path, report.to_csv().as_bytes())?;
    println!(
        "instance: f_score={} auc_pr={}",
        report.instance.f_score, report.instance.auc_pr
    );
    println!(
        "bag: f_score={} auc_pr={}",
        report.bag.f_score, report.bag.auc_pr
    );
    println!("wrote report {}", path.display());
    Ok(())
}

/// Trains and evaluates across an axis of bag sizes or witness rates and
/// writes the sweep report.
pub fn cmd_sweep(cfg: &RunConfig, ov: &Overrides) -> Result<(), CliError> {
    let ds = cfg.dataset()?;
    let default_section = SweepSection::default();
    let section = cfg.raw.sweep.as_ref().unwrap_or(&default_section);
    let axis: SweepAxis = ov
        .axis
        .as_deref()
        .or(section.axis.as_deref())
        .ok_or_else(|| config_err("sweep needs an axis (--axis or [sweep].axis)"))?
        .parse()?;
    let values = ov
        .values
        .as_deref()
        .or(section.values.as_deref())
        .ok_or_else(|| config_err("sweep needs values (--values or [sweep].values)"))?;
    let train_pool = cfg.load_pool(Split::Train)?;
    let test_pool = cfg.load_pool(Split::Test)?;
    let mut train_config = cfg.train_config(ov.seed);
    if let Some(epochs) = section.epochs {
        train_config.epochs = epochs;
    }
    let spec = SweepSpec {
        train_pool: &train_pool,
        test_pool: &test_pool,
        target_class: ds.target_class,
        base_gen: gen_config(ds, ds.n_bags, ds.seed),
        n_test_bags: ds.n_test_bags,
        train_config,
        tau: cfg.raw.eval.tau,
    };
    let report = sweep(&spec, axis, values, section.repeats)?;
    let path = ov
        .out
        .clone()
        .unwrap_or_else(|| cfg.resolve(&section.report));
    write_artifact(&path, report.to_csv().as_bytes())?;
    println!(
        "wrote sweep report {} ({} points)",
        path.display(),
        report.points.len()
    );
    Ok(())
}

/// Exports original/reconstruction grids for test instances through a
/// targeted checkpoint.
pub fn cmd_reconstruct(cfg: &RunConfig, ov: &Overrides) -> Result<(), CliError> {
    let ds = cfg.dataset()?;
    let test = load_bags(&cfg.resolve(&ds.test_path))?;
    let model = load_checkpoint(&cfg.eval_checkpoint_path())?
        .into_targeted_with_d(cfg.raw.model.d)?;
    let section = &cfg.raw.reconstruct;
    let out = ov.out.clone().unwrap_or_else(|| cfg.resolve(&section.out));
    ensure_parent(&out)?;
    let (originals, reconstructions) =
        reconstruct_grid(&model, test.bags(), section.rows, section.cols, &out)?;
    println!(
        "wrote {} and {}",
        originals.display(),
        reconstructions.display()
    );
    Ok(())
}

/// Runs the synthetic identifiability experiment and writes its report.
pub fn cmd_identifiability(cfg: &RunConfig, ov: &Overrides) -> Result<(), CliError> {
    let section = cfg.raw.identifiability.as_ref().ok_or_else(|| {
        config_err("config needs an [identifiability] section for this command")
    })?;
    let config = IdentifiabilityConfig {
        d: section.d,
        m: section.m.unwrap_or(section.d),
        k_groups: section.k_groups,
        bags_per_group: section.bags_per_group,
        bag_size: section.bag_size,
        noise_std: section.noise_std,
        seed: ov.seed.unwrap_or(section.seed),
        identity_mixing: section.identity_mixing,
        train: TrainConfig {
            epochs: section.epochs,
            learning_rate: section.learning_rate,
            alpha: section.alpha,
            d: section.d,
            decoder_noise_var: section.noise_var,
            seed: section.train_seed,
            ..TrainConfig::default()
        },
    };
    let (report, _) = run_identifiability(&config)?;
    let path = ov
        .out
        .clone()
        .unwrap_or_else(|| cfg.resolve(&section.report));
    write_artifact(&path, report.to_csv().as_bytes())?;
    println!(
        "mcc={} shuffled_mcc={} n_instances={} e_matrix_cond={:.3}",
        report.mcc, report.shuffled_mcc, report.n_instances, report.e_matrix_cond
    );
    println!("wrote report {}", path.display());
    Ok(())
}
