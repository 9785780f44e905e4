//! Instance- and bag-level metrics, sensitivity sweeps, reconstruction
//! export, and the empirical identifiability check.

pub mod pgm;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::{
    make_bags, make_synthetic_identifiable, make_synthetic_with_mixing, Bag, DataError,
    GenerationConfig, InstancePool, Mixing, SyntheticDataset,
};
use crate::model::{predict_bag_label, InstanceScorer, ModelError, TargetedMILModel};
use crate::numerics::{linalg, NumericsError, Tensor};
use crate::train::{train, TrainConfig, TrainError};

/// Errors from evaluation and reporting.
#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("length mismatch: {scores} scores vs {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("labels must be 0 or 1, got {0}")]
    BadLabel(u8),
    #[error("threshold must lie in (0,1), got {0}")]
    BadThreshold(f64),
    #[error("AUC-PR needs at least one positive label")]
    NoPositives,
    #[error("affine alignment failed: {0}")]
    AlignmentFailure(String),
    #[error("instances are not square images: m = {0} is not a perfect square")]
    NotSquare(usize),
    #[error("grid needs {needed} instances but only {got} are available")]
    InsufficientInstances { needed: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Threshold metrics plus ranking quality for one score/label set.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// Average precision; 0.0 by convention when the set has no positive
    /// labels (degenerate sets must not crash sweeps).
    pub auc_pr: f64,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn check_scores_labels(scores: &[f64], labels: &[u8]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty("score list"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(EvalError::BadLabel(bad));
    }
    Ok(())
}

/// Confusion counts and derived metrics at threshold `tau`
/// (prediction = score ≥ τ; 0/0 ratios collapse to 0).
pub fn precision_recall_f1(scores: &[f64], labels: &[u8], tau: f64) -> Result<Metrics, EvalError> {
    check_scores_labels(scores, labels)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(EvalError::BadThreshold(tau));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= tau, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f_score = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let auc = if labels.contains(&1) {
        auc_pr(scores, labels)?
    } else {
        0.0
    };
    Ok(Metrics {
        precision,
        recall,
        f_score,
        auc_pr: auc,
        threshold: tau,
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Area under the precision-recall curve: average precision with
/// rectangular (step) interpolation over descending-score prefix cuts;
/// equal scores are processed as one group.
pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    check_scores_labels(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut ap = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        // One tie group: every index with this exact score.
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Instance- and bag-level evaluation of a scorer on labeled test bags.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub instance: Metrics,
    pub bag: Metrics,
}

impl EvalReport {
    /// Comma-separated rows with a one-line header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "level,threshold,precision,recall,f_score,auc_pr,tp,fp,tn,fn\n",
        );
        for (level, m) in [("instance", &self.instance), ("bag", &self.bag)] {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                level,
                m.threshold,
                m.precision,
                m.recall,
                m.f_score,
                m.auc_pr,
                m.tp,
                m.fp,
                m.tn,
                m.fn_
            );
        }
        out
    }
}

/// Scores every test bag: instance metrics pool all instances across
/// bags; bag metrics apply the standard assumption (max score ≥ τ, which
/// is exactly `predict_bag_label`) with the same τ.
pub fn evaluate<S: InstanceScorer>(
    scorer: &S,
    test_bags: &[Bag],
    tau: f64,
) -> Result<EvalReport, EvalError> {
    if test_bags.is_empty() {
        return Err(EvalError::Empty("test bag list"));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(EvalError::BadThreshold(tau));
    }
    let mut instance_scores = Vec::new();
    let mut instance_labels = Vec::new();
    let mut bag_scores = Vec::new();
    let mut bag_labels = Vec::new();
    for bag in test_bags {
        let scores = scorer.score_bag(bag)?;
        let max_score = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        debug_assert_eq!(
            predict_bag_label(&scores, tau).expect("nonempty bag, valid threshold"),
            u8::from(max_score >= tau),
            "bag rule must equal max-score thresholding"
        );
        instance_scores.extend_from_slice(&scores);
        instance_labels.extend_from_slice(bag.instance_labels());
        bag_scores.push(max_score);
        bag_labels.push(bag.bag_label());
    }
    Ok(EvalReport {
        instance: precision_recall_f1(&instance_scores, &instance_labels, tau)?,
        bag: precision_recall_f1(&bag_scores, &bag_labels, tau)?,
    })
}

fn column(data: &Tensor, j: usize) -> Vec<f64> {
    let (n, d) = (data.rows(), data.cols());
    (0..n).map(|i| data.data()[i * d + j]).collect()
}

fn pearson_abs(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).abs())
}

/// Mean correlation coefficient after affine alignment: fits an affine
/// map from `z_est` to `z_true` by least squares, then averages the
/// absolute per-dimension Pearson correlation between the mapped
/// estimates and the true latents.
pub fn mcc_affine(z_true: &Tensor, z_est: &Tensor) -> Result<f64, EvalError> {
    let (n, d) = (z_true.rows(), z_true.cols());
    if z_est.rows() != n || z_est.cols() != d {
        return Err(EvalError::InvalidArgument(format!(
            "latent matrices disagree: true {:?} vs estimated {:?}",
            z_true.shape(),
            z_est.shape()
        )));
    }
    if d == 0 || n <= d {
        return Err(EvalError::InvalidArgument(format!(
            "need n > d ≥ 1, got n = {n}, d = {d}"
        )));
    }
    // Design matrix [z_est | 1] for the affine fit.
    let mut design = vec![0.0; n * (d + 1)];
    for i in 0..n {
        design[i * (d + 1)..i * (d + 1) + d]
            .copy_from_slice(&z_est.data()[i * d..(i + 1) * d]);
        design[i * (d + 1) + d] = 1.0;
    }
    let coef = linalg::lstsq(&design, n, d + 1, z_true.data(), d)
        .map_err(|e| EvalError::AlignmentFailure(format!("least squares failed: {e}")))?;
    // mapped = design · coef, [n × d].
    let mut mapped = vec![0.0; n * d];
    crate::numerics::gemm::matmul(n, d + 1, d, &design, &coef, &mut mapped);
    let mapped = Tensor::new(vec![n, d], mapped)?;

    let mut acc = 0.0;
    for j in 0..d {
        let true_col = column(z_true, j);
        let mapped_col = column(&mapped, j);
        let corr = pearson_abs(&mapped_col, &true_col).ok_or_else(|| {
            EvalError::AlignmentFailure(format!(
                "dimension {j} is degenerate (zero variance after alignment)"
            ))
        })?;
        acc += corr;
    }
    Ok(acc / d as f64)
}

/// Sweepable dataset-generation axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    BagSize,
    WitnessRate,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::BagSize => "bag_size",
            Self::WitnessRate => "witness_rate",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s {
            "bag_size" => Ok(Self::BagSize),
            "witness_rate" => Ok(Self::WitnessRate),
            other => Err(EvalError::InvalidArgument(format!(
                "unknown sweep axis '{other}' (expected bag_size or witness_rate)"
            ))),
        }
    }
}

/// One sweep point: instance AUC-PR statistics over `runs` repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub axis_value: f64,
    pub mean_auc_pr: f64,
    /// Population standard deviation (0 by convention for a single run).
    pub std_auc_pr: f64,
    pub runs: usize,
}

/// Sensitivity-sweep result over one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// Comma-separated rows with a one-line header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,axis_value,mean_auc_pr,std_auc_pr,runs\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                self.axis.name(),
                p.axis_value,
                p.mean_auc_pr,
                p.std_auc_pr,
                p.runs
            );
        }
        out
    }
}

/// Everything one sweep run needs: pools to draw bags from, the base
/// generation recipe, and the training recipe.
#[derive(Debug, Clone)]
pub struct SweepSpec<'a> {
    pub train_pool: &'a InstancePool,
    pub test_pool: &'a InstancePool,
    pub target_class: u8,
    pub base_gen: GenerationConfig,
    pub n_test_bags: usize,
    pub train_config: TrainConfig,
    pub tau: f64,
}

/// Trains and evaluates one model per (axis value, repeat) with fresh
/// seeds, reporting mean/std of instance AUC-PR per axis value. Points
/// come out sorted by axis value.
pub fn sweep(
    spec: &SweepSpec<'_>,
    axis: SweepAxis,
    values: &[f64],
    repeats: usize,
) -> Result<SweepReport, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty("sweep value list"));
    }
    if repeats == 0 {
        return Err(EvalError::InvalidArgument("repeats must be ≥ 1".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut points = Vec::with_capacity(sorted.len());
    for (vi, &value) in sorted.iter().enumerate() {
        let mut aucs = Vec::with_capacity(repeats);
        for rep in 0..repeats {
            let offset = (vi * repeats + rep) as u64 + 1;
            let mut gen = spec.base_gen.clone();
            match axis {
                SweepAxis::BagSize => {
                    if !(value >= 2.0) {
                        return Err(EvalError::InvalidArgument(format!(
                            "bag_size sweep value must be ≥ 2, got {value}"
                        )));
                    }
                    gen.mean_size = value;
                }
                SweepAxis::WitnessRate => gen.witness_rate = value,
            }
            gen.seed = spec.base_gen.seed.wrapping_add(offset.wrapping_mul(7919));
            let train_set = make_bags(spec.train_pool, spec.target_class, &gen)?;
            let mut test_gen = gen.clone();
            test_gen.n_bags = spec.n_test_bags;
            test_gen.seed = gen.seed.wrapping_add(1);
            let test_set = make_bags(spec.test_pool, spec.target_class, &test_gen)?;

            let mut tc = spec.train_config;
            tc.seed = tc.seed.wrapping_add(offset);
            let outcome = train(&train_set, &tc)?;
            let report = evaluate(&outcome.model, test_set.bags(), spec.tau)?;
            aucs.push(report.instance.auc_pr);
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        let std = if aucs.len() == 1 {
            0.0
        } else {
            (aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / aucs.len() as f64).sqrt()
        };
        points.push(SweepPoint {
            axis_value: value,
            mean_auc_pr: mean,
            std_auc_pr: std,
            runs: repeats,
        });
    }
    Ok(SweepReport { axis, points })
}

/// Configuration for the empirical identifiability experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiabilityConfig {
    pub d: usize,
    pub m: usize,
    pub k_groups: usize,
    pub bags_per_group: usize,
    pub bag_size: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Use the identity mixing map (requires m = d) instead of a random
    /// full-rank affine map followed by a logistic nonlinearity.
    pub identity_mixing: bool,
    pub train: TrainConfig,
}

/// Outcome of the identifiability experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiabilityReport {
    pub mcc: f64,
    /// Control: same latents with shuffled rows; should sit near 0.
    pub shuffled_mcc: f64,
    pub n_instances: usize,
    pub e_matrix_cond: f64,
    pub final_mean_total: f64,
}

impl IdentifiabilityReport {
    /// Comma-separated rows with a one-line header.
    pub fn to_csv(&self) -> String {
        format!(
            "mcc,shuffled_mcc,n_instances,e_matrix_cond,final_mean_total\n{},{},{},{},{}\n",
            self.mcc, self.shuffled_mcc, self.n_instances, self.e_matrix_cond, self.final_mean_total
        )
    }
}

/// Posterior means of every instance of every bag, `[n × d]`, in bag
/// order.
pub fn posterior_means(model: &TargetedMILModel, bags: &[Bag]) -> Result<Tensor, EvalError> {
    if bags.is_empty() {
        return Err(EvalError::Empty("bag list"));
    }
    let d = model.hyper().d;
    let mut rows = Vec::new();
    let mut n = 0;
    for bag in bags {
        if bag.m() != model.hyper().m {
            return Err(EvalError::Model(ModelError::DimMismatch {
                expected: model.hyper().m,
                got: bag.m(),
            }));
        }
        let (mean, _) = model.encode_batch(&bag.to_tensor());
        rows.extend_from_slice(mean.data());
        n += bag.n_instances();
    }
    Ok(Tensor::new(vec![n, d], rows)?)
}

/// Generates identifiable synthetic data, trains a TargetedMIL model on
/// it, and measures how well posterior means recover the true latents up
/// to an affine map — plus a shuffled control that destroys the pairing.
pub fn run_identifiability(
    config: &IdentifiabilityConfig,
) -> Result<(IdentifiabilityReport, SyntheticDataset), EvalError> {
    let data = if config.identity_mixing {
        make_synthetic_with_mixing(
            config.d,
            config.m,
            config.k_groups,
            config.bags_per_group,
            config.bag_size,
            config.noise_std,
            config.seed,
            Mixing::Identity,
        )?
    } else {
        make_synthetic_identifiable(
            config.d,
            config.m,
            config.k_groups,
            config.bags_per_group,
            config.bag_size,
            config.noise_std,
            config.seed,
        )?
    };
    let dataset = data.to_bag_dataset()?;
    let outcome = train(&dataset, &config.train)?;
    let z_est = posterior_means(&outcome.model, dataset.bags())?;
    let z_true = data.z_true_matrix();
    let mcc = mcc_affine(&z_true, &z_est)?;

    // Control: break the instance pairing by shuffling estimate rows.
    const SHUFFLE_SALT: u64 = 0x53_48_55_46_46_4c_45_00;
    let mut order: Vec<usize> = (0..z_est.rows()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    order.shuffle(&mut rng);
    let d = config.d;
    let mut shuffled = vec![0.0; z_est.len()];
    for (dst, &src) in order.iter().enumerate() {
        shuffled[dst * d..(dst + 1) * d].copy_from_slice(&z_est.data()[src * d..(src + 1) * d]);
    }
    let shuffled = Tensor::new(vec![z_est.rows(), d], shuffled)?;
    let shuffled_mcc = mcc_affine(&z_true, &shuffled)?;

    let report = IdentifiabilityReport {
        mcc,
        shuffled_mcc,
        n_instances: data.n_instances(),
        e_matrix_cond: data.e_matrix_cond,
        final_mean_total: outcome.history.final_mean_total().unwrap_or(f64::NAN),
    };
    Ok((report, data))
}
