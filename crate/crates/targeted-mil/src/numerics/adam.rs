//! Adaptive-moment optimizer with bias correction.

use super::{NumericsError, Tensor};

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stab: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_stab: 1e-8,
        }
    }
}

impl AdamHyper {
    fn validate(&self) -> Result<(), NumericsError> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps_stab > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NumericsError::InvalidArgument(format!(
                "optimizer hyperparameters out of range: {self:?}"
            )))
        }
    }
}

/// Per-parameter first/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    hyper: AdamHyper,
}

impl OptimizerState {
    /// Fresh state with zero moments shaped like `params`.
    pub fn new(params: &[&Tensor], hyper: AdamHyper) -> Result<Self, NumericsError> {
        hyper.validate()?;
        Ok(Self {
            step_count: 0,
            first_moment: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
            second_moment: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
            hyper,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn hyper(&self) -> &AdamHyper {
        &self.hyper
    }

    /// One bias-corrected adaptive-moment update, in place on `params`.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
    ) -> Result<(), NumericsError> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(NumericsError::ShapeMismatch {
                context: "optimizer_step parameter list",
                expected: vec![self.first_moment.len()],
                got: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), (m, v)) in params
            .iter()
            .zip(grads)
            .zip(self.first_moment.iter().zip(&self.second_moment))
        {
            if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
                return Err(NumericsError::ShapeMismatch {
                    context: "optimizer_step tensor shapes",
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let AdamHyper {
            learning_rate,
            beta1,
            beta2,
            eps_stab,
        } = self.hyper;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps_stab);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh(params: &[Tensor], hyper: AdamHyper) -> OptimizerState {
        let refs: Vec<&Tensor> = params.iter().collect();
        OptimizerState::new(&refs, hyper).unwrap()
    }

    fn apply(st: &mut OptimizerState, params: &mut [Tensor], grads: &[Tensor]) {
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        st.step(&mut refs, grads).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0, 3.0])];
        let grads = vec![Tensor::zeros(vec![3])];
        let mut st = fresh(&params, AdamHyper::default());
        apply(&mut st, &mut params, &grads);
        assert_eq!(params[0].data(), &[1.0, -2.0, 3.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_update_is_signed_learning_rate() {
        // Step 1 with constant grad g: bias-corrected m̂=g, v̂=g², so the
        // update per coordinate is −lr·g/(|g|+ε).
        let lr = 1e-3;
        let g = vec![0.5, -2.0, 1e-12];
        let mut params = vec![Tensor::vector(vec![0.0, 0.0, 0.0])];
        let grads = vec![Tensor::vector(g.clone())];
        let mut st = fresh(&params, AdamHyper::default());
        apply(&mut st, &mut params, &grads);
        for (p, gi) in params[0].data().iter().zip(&g) {
            let expect = -lr * gi / (gi.abs() + 1e-8);
            assert!(
                (p - expect).abs() < 1e-12,
                "param {p} vs expected {expect}"
            );
        }
    }

    #[test]
    fn zero_learning_rate_updates_moments_only() {
        let mut params = vec![Tensor::vector(vec![1.0])];
        let grads = vec![Tensor::vector(vec![0.7])];
        let hyper = AdamHyper {
            learning_rate: 0.0,
            ..AdamHyper::default()
        };
        let mut st = fresh(&params, hyper);
        apply(&mut st, &mut params, &grads);
        assert_eq!(params[0].data(), &[1.0]);
        assert!((st.first_moment[0].data()[0] - 0.1 * 0.7).abs() < 1e-15);
        assert!((st.second_moment[0].data()[0] - 0.001 * 0.49).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0])];
        let grads = vec![Tensor::vector(vec![1.0])];
        let mut st = fresh(&params, AdamHyper::default());
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        assert!(st.step(&mut refs, &grads).is_err());
    }

    #[test]
    fn step_count_increments_by_one_per_update() {
        let mut params = vec![Tensor::vector(vec![0.0])];
        let grads = vec![Tensor::vector(vec![1.0])];
        let mut st = fresh(&params, AdamHyper::default());
        for expected in 1..=5 {
            apply(&mut st, &mut params, &grads);
            assert_eq!(st.step_count(), expected);
        }
    }
}
