//! The TargetedMIL model: amortized encoder, additive-noise decoder,
//! bag-conditioned prior, linear latent classifier, target selection, and
//! every loss term.
//!
//! Conventions: activations flow as row vectors (`[n×in]·[in×out]`); all
//! hidden layers use the softplus smooth-ramp activation; log-variance
//! heads are clamped to [−8, 8]; one optimization step treats the argmax
//! target selection as a constant.

pub(crate) mod net;

use crate::data::Bag;
use crate::numerics::{
    grad_check, logistic_scalar, GradCheckReport, Graph, NumericsError, Tensor, VarId,
};
use net::{Linear, LinearVars};
use rand_chacha::ChaCha12Rng;

const HIDDEN1: usize = 256;
const HIDDEN2: usize = 128;
const PRIOR_HIDDEN: usize = 128;
pub(crate) const LOG_VAR_CLAMP: f64 = 8.0;
pub(crate) const PROB_CLAMP: f64 = 1e-7;

/// Errors from model inference and loss evaluation.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("threshold must lie in (0,1), got {0}")]
    BadThreshold(f64),
    #[error("invalid hyperparameter: {0}")]
    BadHyper(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Diagonal Gaussian over latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self, ModelError> {
        if mean.len() != log_var.len() {
            return Err(ModelError::DimMismatch {
                expected: mean.len(),
                got: log_var.len(),
            });
        }
        Ok(Self { mean, log_var })
    }

    pub fn d(&self) -> usize {
        self.mean.len()
    }
}

/// Model hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelHyper {
    /// Instance dimensionality.
    pub m: usize,
    /// Latent dimensionality.
    pub d: usize,
    /// Classifier loss weight α.
    pub alpha: f64,
    /// Fixed decoder likelihood variance σ_x².
    pub decoder_noise_var: f64,
}

impl ModelHyper {
    fn validate(&self) -> Result<(), ModelError> {
        if self.m == 0 || self.d == 0 {
            return Err(ModelError::BadHyper("m and d must be ≥ 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(ModelError::BadHyper(format!("α must be ≥ 0, got {}", self.alpha)));
        }
        if !(self.decoder_noise_var > 0.0) {
            return Err(ModelError::BadHyper(format!(
                "decoder noise variance must be > 0, got {}",
                self.decoder_noise_var
            )));
        }
        Ok(())
    }
}

/// All loss terms for one bag, plus the selected target index.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// Expected log-likelihood (reconstruction) term of the ELBO.
    pub recon: f64,
    pub kl: f64,
    pub cls: f64,
    /// `−(recon − kl) + α·cls`.
    pub total: f64,
    pub selected_index: usize,
}

/// ELBO pieces for one bag (single-sample estimate).
#[derive(Debug, Clone, PartialEq)]
pub struct ElboParts {
    pub recon: f64,
    pub kl: f64,
    pub selected_index: usize,
}

/// Anything that produces per-instance positivity scores for a bag.
pub trait InstanceScorer {
    fn score_bag(&self, bag: &Bag) -> Result<Vec<f64>, ModelError>;
}

/// All trainable parameters of the TargetedMIL model.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetedMILModel {
    pub(crate) enc_l1: Linear,
    pub(crate) enc_l2: Linear,
    pub(crate) enc_mean: Linear,
    pub(crate) enc_log_var: Linear,
    pub(crate) dec_l1: Linear,
    pub(crate) dec_l2: Linear,
    pub(crate) dec_out: Linear,
    pub(crate) prior_embed: Linear,
    pub(crate) prior_mean: Linear,
    pub(crate) prior_log_var: Linear,
    /// Linear classifier weight, `[d×1]`.
    pub(crate) cls_w: Tensor,
    /// Linear classifier bias, `[1]`.
    pub(crate) cls_b: Tensor,
    hyper: ModelHyper,
}

/// Argmax with ties broken by the lowest index.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut idx = 0;
    let mut best = xs[0];
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > best {
            best = x;
            idx = i;
        }
    }
    idx
}

impl TargetedMILModel {
    /// Initializes with fan-in-scaled uniform hidden layers and zeroed
    /// output heads and classifier: the prior and posterior start as
    /// standard normals and the decoder mean starts at a uniform 0.5.
    pub fn init(hyper: ModelHyper, rng: &mut ChaCha12Rng) -> Result<Self, ModelError> {
        hyper.validate()?;
        let (m, d) = (hyper.m, hyper.d);
        Ok(Self {
            enc_l1: Linear::fan_in(m, HIDDEN1, rng),
            enc_l2: Linear::fan_in(HIDDEN1, HIDDEN2, rng),
            enc_mean: Linear::zeroed(HIDDEN2, d),
            enc_log_var: Linear::zeroed(HIDDEN2, d),
            dec_l1: Linear::fan_in(d, HIDDEN2, rng),
            dec_l2: Linear::fan_in(HIDDEN2, HIDDEN1, rng),
            dec_out: Linear::zeroed(HIDDEN1, m),
            prior_embed: Linear::fan_in(m, PRIOR_HIDDEN, rng),
            prior_mean: Linear::zeroed(PRIOR_HIDDEN, d),
            prior_log_var: Linear::zeroed(PRIOR_HIDDEN, d),
            cls_w: Tensor::zeros(vec![d, 1]),
            cls_b: Tensor::zeros(vec![1]),
            hyper,
        })
    }

    /// Model with every parameter zero (degenerate; for tests and the
    /// documented zero-initialization behaviors).
    pub fn zeroed(hyper: ModelHyper) -> Result<Self, ModelError> {
        hyper.validate()?;
        let (m, d) = (hyper.m, hyper.d);
        Ok(Self {
            enc_l1: Linear::zeroed(m, HIDDEN1),
            enc_l2: Linear::zeroed(HIDDEN1, HIDDEN2),
            enc_mean: Linear::zeroed(HIDDEN2, d),
            enc_log_var: Linear::zeroed(HIDDEN2, d),
            dec_l1: Linear::zeroed(d, HIDDEN2),
            dec_l2: Linear::zeroed(HIDDEN2, HIDDEN1),
            dec_out: Linear::zeroed(HIDDEN1, m),
            prior_embed: Linear::zeroed(m, PRIOR_HIDDEN),
            prior_mean: Linear::zeroed(PRIOR_HIDDEN, d),
            prior_log_var: Linear::zeroed(PRIOR_HIDDEN, d),
            cls_w: Tensor::zeros(vec![d, 1]),
            cls_b: Tensor::zeros(vec![1]),
            hyper,
        })
    }

    pub fn hyper(&self) -> &ModelHyper {
        &self.hyper
    }

    /// Canonical parameter-name list, aligned with [`Self::params`].
    pub fn param_names() -> &'static [&'static str] {
        &[
            "enc.l1.w",
            "enc.l1.b",
            "enc.l2.w",
            "enc.l2.b",
            "enc.mean.w",
            "enc.mean.b",
            "enc.log_var.w",
            "enc.log_var.b",
            "dec.l1.w",
            "dec.l1.b",
            "dec.l2.w",
            "dec.l2.b",
            "dec.out.w",
            "dec.out.b",
            "prior.embed.w",
            "prior.embed.b",
            "prior.mean.w",
            "prior.mean.b",
            "prior.log_var.w",
            "prior.log_var.b",
            "cls.w",
            "cls.b",
        ]
    }

    /// All parameter tensors in canonical order.
    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.enc_l1.w,
            &self.enc_l1.b,
            &self.enc_l2.w,
            &self.enc_l2.b,
            &self.enc_mean.w,
            &self.enc_mean.b,
            &self.enc_log_var.w,
            &self.enc_log_var.b,
            &self.dec_l1.w,
            &self.dec_l1.b,
            &self.dec_l2.w,
            &self.dec_l2.b,
            &self.dec_out.w,
            &self.dec_out.b,
            &self.prior_embed.w,
            &self.prior_embed.b,
            &self.prior_mean.w,
            &self.prior_mean.b,
            &self.prior_log_var.w,
            &self.prior_log_var.b,
            &self.cls_w,
            &self.cls_b,
        ]
    }

    /// Mutable views of all parameters in canonical order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.enc_l1.w,
            &mut self.enc_l1.b,
            &mut self.enc_l2.w,
            &mut self.enc_l2.b,
            &mut self.enc_mean.w,
            &mut self.enc_mean.b,
            &mut self.enc_log_var.w,
            &mut self.enc_log_var.b,
            &mut self.dec_l1.w,
            &mut self.dec_l1.b,
            &mut self.dec_l2.w,
            &mut self.dec_l2.b,
            &mut self.dec_out.w,
            &mut self.dec_out.b,
            &mut self.prior_embed.w,
            &mut self.prior_embed.b,
            &mut self.prior_mean.w,
            &mut self.prior_mean.b,
            &mut self.prior_log_var.w,
            &mut self.prior_log_var.b,
            &mut self.cls_w,
            &mut self.cls_b,
        ]
    }

    fn check_m(&self, got: usize) -> Result<(), ModelError> {
        if got != self.hyper.m {
            return Err(ModelError::DimMismatch {
                expected: self.hyper.m,
                got,
            });
        }
        Ok(())
    }

    fn check_d(&self, got: usize) -> Result<(), ModelError> {
        if got != self.hyper.d {
            return Err(ModelError::DimMismatch {
                expected: self.hyper.d,
                got,
            });
        }
        Ok(())
    }

    /// Encoder trunk + heads for a batch of instances:
    /// `[n×m] → (mean [n×d], log_var [n×d])`.
    pub(crate) fn encode_batch(&self, x: &Tensor) -> (Tensor, Tensor) {
        let h1 = net::map_tensor(&self.enc_l1.forward_value(x), crate::numerics::softplus_scalar);
        let h2 = net::map_tensor(&self.enc_l2.forward_value(&h1), crate::numerics::softplus_scalar);
        let mean = self.enc_mean.forward_value(&h2);
        let log_var = net::map_tensor(&self.enc_log_var.forward_value(&h2), |v| {
            v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)
        });
        (mean, log_var)
    }

    /// Amortized posterior q(z|x) for one instance.
    pub fn encode(&self, x: &[f64]) -> Result<GaussianParams, ModelError> {
        self.check_m(x.len())?;
        let xt = Tensor::new(vec![1, x.len()], x.to_vec()).map_err(ModelError::from)?;
        let (mean, log_var) = self.encode_batch(&xt);
        GaussianParams::new(mean.into_data(), log_var.into_data())
    }

    /// Decoder mean f(z), logistic-squashed into (0,1).
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_d(z.len())?;
        let zt = Tensor::new(vec![1, z.len()], z.to_vec()).map_err(ModelError::from)?;
        Ok(self.decode_batch(&zt).into_data())
    }

    pub(crate) fn decode_batch(&self, z: &Tensor) -> Tensor {
        let h1 = net::map_tensor(&self.dec_l1.forward_value(z), crate::numerics::softplus_scalar);
        let h2 = net::map_tensor(&self.dec_l2.forward_value(&h1), crate::numerics::softplus_scalar);
        net::map_tensor(&self.dec_out.forward_value(&h2), logistic_scalar)
    }

    /// Bag-conditioned prior p(z|B): per-instance embedding, exact
    /// permutation-invariant mean pooling, then the prior heads.
    pub fn bag_prior(&self, bag: &Bag) -> Result<GaussianParams, ModelError> {
        self.check_m(bag.m())?;
        let x = bag.to_tensor();
        let e = net::map_tensor(
            &self.prior_embed.forward_value(&x),
            crate::numerics::softplus_scalar,
        );
        let pooled = net::mean_rows_sorted(&e);
        let mean = self.prior_mean.forward_value(&pooled);
        let log_var = net::map_tensor(&self.prior_log_var.forward_value(&pooled), |v| {
            v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)
        });
        GaussianParams::new(mean.into_data(), log_var.into_data())
    }

    /// Pre-logistic linear classifier score w·z + b.
    pub fn classifier_score(&self, z: &[f64]) -> Result<f64, ModelError> {
        self.check_d(z.len())?;
        let dot: f64 = z.iter().zip(self.cls_w.data()).map(|(a, b)| a * b).sum();
        Ok(dot + self.cls_b.data()[0])
    }

    /// Positive-instance probability logistic(w·z + b).
    pub fn classify(&self, z: &[f64]) -> Result<f64, ModelError> {
        Ok(logistic_scalar(self.classifier_score(z)?))
    }

    /// Per-instance positive probabilities, in instance order.
    pub fn predict_instance_scores(&self, bag: &Bag) -> Result<Vec<f64>, ModelError> {
        self.check_m(bag.m())?;
        let (mean, _) = self.encode_batch(&bag.to_tensor());
        let d = self.hyper.d;
        Ok(mean
            .data()
            .chunks_exact(d)
            .map(|row| {
                let dot: f64 = row.iter().zip(self.cls_w.data()).map(|(a, b)| a * b).sum();
                logistic_scalar(dot + self.cls_b.data()[0])
            })
            .collect())
    }

    /// Index of the target instance: argmax classifier score over the
    /// posterior means, ties broken by the lowest index.
    pub fn select_target(&self, bag: &Bag) -> Result<usize, ModelError> {
        Ok(argmax(&self.predict_instance_scores(bag)?))
    }

    /// Single-sample ELBO estimate for a bag.
    pub fn elbo(&self, bag: &Bag, noise: &[f64]) -> Result<ElboParts, ModelError> {
        let mut g = Graph::new();
        let vars = self.register(&mut g)?;
        let tape = self.build_total_loss(&mut g, &vars, bag, 0, noise)?;
        Ok(ElboParts {
            recon: g.value(tape.recon).item(),
            kl: g.value(tape.kl).item(),
            selected_index: tape.selected,
        })
    }

    /// Binary cross-entropy of the bag label against the selected
    /// instance's classifier output (probabilities clamped to
    /// [1e-7, 1−1e-7]).
    pub fn cls_loss(&self, bag: &Bag, y: u8) -> Result<f64, ModelError> {
        let t = self.select_target(bag)?;
        let q = self.encode(bag.instance(t))?;
        let p = self.classify(&q.mean)?.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        Ok(if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
    }

    /// Full per-bag objective `−(recon − kl) + α·cls`.
    pub fn total_loss(&self, bag: &Bag, y: u8, noise: &[f64]) -> Result<LossBreakdown, ModelError> {
        let mut g = Graph::new();
        let vars = self.register(&mut g)?;
        let tape = self.build_total_loss(&mut g, &vars, bag, y, noise)?;
        Ok(LossBreakdown {
            recon: g.value(tape.recon).item(),
            kl: g.value(tape.kl).item(),
            cls: g.value(tape.cls).item(),
            total: g.value(tape.total).item(),
            selected_index: tape.selected,
        })
    }

    /// Verifies the analytic gradient of the full objective against
    /// central finite differences over every parameter coordinate. The
    /// target selection is held fixed across probes, matching its
    /// treatment inside one optimization step.
    pub fn grad_check_total_loss(
        &self,
        bag: &Bag,
        y: u8,
        noise: &[f64],
        h: f64,
        tol: f64,
    ) -> Result<GradCheckReport, ModelError> {
        let params: Vec<Tensor> = self.params().into_iter().cloned().collect();
        let t = self.select_target(bag)?;
        let report = grad_check(
            |g, ids| {
                let vars = ModelVars::from_flat(ids);
                let tape = self
                    .build_total_loss_with_target(g, &vars, bag, y, noise, t)
                    .map_err(|e| match e {
                        ModelError::Numerics(n) => n,
                        other => NumericsError::InvalidArgument(other.to_string()),
                    })?;
                Ok(tape.total)
            },
            &params,
            h,
            tol,
        )?;
        Ok(report)
    }

    /// Registers every parameter on a tape, in canonical order.
    pub(crate) fn register(&self, g: &mut Graph) -> Result<ModelVars, NumericsError> {
        Ok(ModelVars {
            enc_l1: self.enc_l1.register(g)?,
            enc_l2: self.enc_l2.register(g)?,
            enc_mean: self.enc_mean.register(g)?,
            enc_log_var: self.enc_log_var.register(g)?,
            dec_l1: self.dec_l1.register(g)?,
            dec_l2: self.dec_l2.register(g)?,
            dec_out: self.dec_out.register(g)?,
            prior_embed: self.prior_embed.register(g)?,
            prior_mean: self.prior_mean.register(g)?,
            prior_log_var: self.prior_log_var.register(g)?,
            cls_w: g.param(self.cls_w.clone())?,
            cls_b: g.param(self.cls_b.clone())?,
        })
    }

    /// Builds the complete per-bag loss on the tape. The target index is
    /// chosen in value space (argmax of classifier scores over posterior
    /// means) and held constant through the step; gradients flow through
    /// the selected instance's encoder/decoder/classifier paths and the
    /// whole-bag prior path.
    pub(crate) fn build_total_loss(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        bag: &Bag,
        y: u8,
        noise: &[f64],
    ) -> Result<TapeLoss, ModelError> {
        let t = self.select_target(bag)?;
        self.build_total_loss_with_target(g, vars, bag, y, noise, t)
    }

    /// As [`Self::build_total_loss`] with the target index already chosen
    /// (selection is constant within a step, so repeated tape builds — the
    /// gradient checker's probes — can reuse it).
    pub(crate) fn build_total_loss_with_target(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        bag: &Bag,
        y: u8,
        noise: &[f64],
        t: usize,
    ) -> Result<TapeLoss, ModelError> {
        self.check_m(bag.m())?;
        self.check_d(noise.len())?;
        debug_assert!(t < bag.n_instances());
        let (m, d) = (self.hyper.m, self.hyper.d);

        let xt = g.constant(Tensor::new(vec![1, m], bag.instance(t).to_vec())?)?;
        let all = g.constant(bag.to_tensor())?;
        let eps = g.constant(Tensor::new(vec![1, d], noise.to_vec())?)?;

        // Posterior q(z|x_t).
        let h1 = vars.enc_l1.forward(g, xt)?;
        let h1 = g.softplus(h1)?;
        let h2 = vars.enc_l2.forward(g, h1)?;
        let h2 = g.softplus(h2)?;
        let q_mean = vars.enc_mean.forward(g, h2)?;
        let q_log_var = vars.enc_log_var.forward(g, h2)?;
        let q_log_var = g.clamp(q_log_var, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)?;

        // Bag-conditioned prior p(z|B).
        let e = vars.prior_embed.forward(g, all)?;
        let e = g.softplus(e)?;
        let pooled = g.mean_rows(e)?;
        let p_mean = vars.prior_mean.forward(g, pooled)?;
        let p_log_var = vars.prior_log_var.forward(g, pooled)?;
        let p_log_var = g.clamp(p_log_var, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)?;

        // Reparameterized sample z = μ + exp(log_var/2) ⊙ ε.
        let sigma = g.affine(q_log_var, 0.5, 0.0)?;
        let sigma = g.exp(sigma)?;
        let scaled = g.mul(sigma, eps)?;
        let z = g.add(q_mean, scaled)?;

        // Decoder mean in (0,1).
        let d1 = vars.dec_l1.forward(g, z)?;
        let d1 = g.softplus(d1)?;
        let d2 = vars.dec_l2.forward(g, d1)?;
        let d2 = g.softplus(d2)?;
        let x_mu = vars.dec_out.forward(g, d2)?;
        let x_mu = g.logistic(x_mu)?;

        // Gaussian log-likelihood with fixed variance σ_x²:
        // recon = −‖x_t − μ‖²/(2σ_x²) − (m/2)·ln(2πσ_x²).
        let var = self.hyper.decoder_noise_var;
        let resid = g.sub(xt, x_mu)?;
        let resid = g.square(resid)?;
        let sse = g.sum_all(resid)?;
        let recon = g.affine(
            sse,
            -0.5 / var,
            -(m as f64) / 2.0 * (2.0 * std::f64::consts::PI * var).ln(),
        )?;

        // Diagonal-Gaussian KL(q ‖ p), summed over dimensions:
        // 0.5·Σ[e^{ql−pl} + (qm−pm)²·e^{−pl} − 1 + pl − ql].
        let dl = g.sub(q_log_var, p_log_var)?;
        let ratio = g.exp(dl)?;
        let dm = g.sub(q_mean, p_mean)?;
        let dm2 = g.square(dm)?;
        let inv_p_var = g.affine(p_log_var, -1.0, 0.0)?;
        let inv_p_var = g.exp(inv_p_var)?;
        let maha = g.mul(dm2, inv_p_var)?;
        let tail = g.affine(dl, -1.0, -1.0)?;
        let inner = g.add(ratio, maha)?;
        let inner = g.add(inner, tail)?;
        let kl_sum = g.sum_all(inner)?;
        let kl = g.affine(kl_sum, 0.5, 0.0)?;

        // Classifier BCE on the selected instance's posterior mean.
        let score = g.matmul(q_mean, vars.cls_w)?;
        let bias = g.broadcast_rows(vars.cls_b, 1)?;
        let score = g.add(score, bias)?;
        let p = g.logistic(score)?;
        let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
        let bce = if y == 1 {
            let lp = g.ln(p)?;
            g.affine(lp, -1.0, 0.0)?
        } else {
            let one_minus = g.affine(p, -1.0, 1.0)?;
            let lq = g.ln(one_minus)?;
            g.affine(lq, -1.0, 0.0)?
        };
        let cls = g.sum_all(bce)?;

        // total = −(recon − kl) + α·cls.
        let elbo = g.sub(recon, kl)?;
        let neg_elbo = g.affine(elbo, -1.0, 0.0)?;
        let weighted_cls = g.affine(cls, self.hyper.alpha, 0.0)?;
        let total = g.add(neg_elbo, weighted_cls)?;

        Ok(TapeLoss {
            recon,
            kl,
            cls,
            total,
            selected: t,
        })
    }
}

impl InstanceScorer for TargetedMILModel {
    fn score_bag(&self, bag: &Bag) -> Result<Vec<f64>, ModelError> {
        self.predict_instance_scores(bag)
    }
}

/// Tape handles for a registered [`TargetedMILModel`].
pub(crate) struct ModelVars {
    pub enc_l1: LinearVars,
    pub enc_l2: LinearVars,
    pub enc_mean: LinearVars,
    pub enc_log_var: LinearVars,
    pub dec_l1: LinearVars,
    pub dec_l2: LinearVars,
    pub dec_out: LinearVars,
    pub prior_embed: LinearVars,
    pub prior_mean: LinearVars,
    pub prior_log_var: LinearVars,
    pub cls_w: VarId,
    pub cls_b: VarId,
}

impl ModelVars {
    /// VarIds in canonical parameter order.
    pub fn flat(&self) -> Vec<VarId> {
        vec![
            self.enc_l1.w,
            self.enc_l1.b,
            self.enc_l2.w,
            self.enc_l2.b,
            self.enc_mean.w,
            self.enc_mean.b,
            self.enc_log_var.w,
            self.enc_log_var.b,
            self.dec_l1.w,
            self.dec_l1.b,
            self.dec_l2.w,
            self.dec_l2.b,
            self.dec_out.w,
            self.dec_out.b,
            self.prior_embed.w,
            self.prior_embed.b,
            self.prior_mean.w,
            self.prior_mean.b,
            self.prior_log_var.w,
            self.prior_log_var.b,
            self.cls_w,
            self.cls_b,
        ]
    }

    /// Inverse of [`ModelVars::flat`]: reassembles the struct from VarIds
    /// in canonical parameter order.
    fn from_flat(ids: &[VarId]) -> Self {
        assert_eq!(ids.len(), 22, "expected the 22 canonical parameters");
        let lin = |i: usize| LinearVars {
            w: ids[i],
            b: ids[i + 1],
        };
        Self {
            enc_l1: lin(0),
            enc_l2: lin(2),
            enc_mean: lin(4),
            enc_log_var: lin(6),
            dec_l1: lin(8),
            dec_l2: lin(10),
            dec_out: lin(12),
            prior_embed: lin(14),
            prior_mean: lin(16),
            prior_log_var: lin(18),
            cls_w: ids[20],
            cls_b: ids[21],
        }
    }
}

/// IDs of the loss nodes on a tape, plus the constant selected index.
pub(crate) struct TapeLoss {
    pub recon: VarId,
    pub kl: VarId,
    pub cls: VarId,
    pub total: VarId,
    pub selected: usize,
}

/// Reparameterization: z = mean + exp(log_var/2) ⊙ noise.
pub fn reparam_sample(g: &GaussianParams, noise: &[f64]) -> Result<Vec<f64>, ModelError> {
    if noise.len() != g.d() {
        return Err(ModelError::DimMismatch {
            expected: g.d(),
            got: noise.len(),
        });
    }
    Ok(g
        .mean
        .iter()
        .zip(&g.log_var)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (lv / 2.0).exp() * e)
        .collect())
}

/// Closed-form KL divergence between diagonal Gaussians, summed over
/// dimensions; always ≥ 0.
pub fn gaussian_kl(q: &GaussianParams, p: &GaussianParams) -> Result<f64, ModelError> {
    if q.d() != p.d() {
        return Err(ModelError::DimMismatch {
            expected: q.d(),
            got: p.d(),
        });
    }
    let mut acc = 0.0;
    for i in 0..q.d() {
        let (qm, ql) = (q.mean[i], q.log_var[i]);
        let (pm, pl) = (p.mean[i], p.log_var[i]);
        acc += (ql - pl).exp() + (qm - pm).powi(2) * (-pl).exp() - 1.0 + pl - ql;
    }
    Ok(0.5 * acc)
}

/// Standard multi-instance bag prediction: positive iff any score ≥ τ.
pub fn predict_bag_label(scores: &[f64], tau: f64) -> Result<u8, ModelError> {
    if scores.is_empty() {
        return Err(ModelError::Empty("score list"));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(ModelError::BadThreshold(tau));
    }
    Ok(scores.iter().any(|&s| s >= tau) as u8)
}
