//! Parameter updates: plain gradient descent and AdamW.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor2;
use crate::scalar::Real;

/// Which update rule [`OptimState::step`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimMode {
    /// θ ← θ − γ∇θ
    Sgd,
    #[default]
    AdamW,
}

/// Hyperparameters of the optimizer.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimConfig {
    pub mode: OptimMode,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            mode: OptimMode::AdamW,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimConfig {
            mode: OptimMode::Sgd,
            learning_rate,
            ..Default::default()
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState<F> {
    config: OptimConfig,
    step: u64,
    first: Vec<Tensor2<F>>,
    second: Vec<Tensor2<F>>,
}

impl<F: Real> OptimState<F> {
    /// Moments are allocated with the same shape as each parameter tensor.
    pub fn new(params: &[&Tensor2<F>], config: OptimConfig) -> Self {
        let zeros: Vec<Tensor2<F>> = params
            .iter()
            .map(|p| Tensor2::zeros(p.rows(), p.cols()))
            .collect();
        OptimState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    /// Apply one update in place. A NaN anywhere in the gradients refuses
    /// the whole update.
    pub fn step(&mut self, params: &mut [&mut Tensor2<F>], grads: &[&Tensor2<F>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Dimension(format!(
                "optimizer: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if !p.same_shape(g) {
                return Err(Error::Dimension(format!(
                    "optimizer: param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(
                    "non-finite gradient, update refused".into(),
                ));
            }
        }
        self.step += 1;
        let lr = F::from_f64_lossy(self.config.learning_rate);
        match self.config.mode {
            OptimMode::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.add_scaled(g, -lr)?;
                }
            }
            OptimMode::AdamW => {
                let b1 = F::from_f64_lossy(self.config.beta1);
                let b2 = F::from_f64_lossy(self.config.beta2);
                let eps = F::from_f64_lossy(self.config.eps);
                let wd = F::from_f64_lossy(self.config.weight_decay);
                let t = self.step as i32;
                let bc1 = F::one() - b1.powi(t);
                let bc2 = F::one() - b2.powi(t);
                for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first[idx];
                    let v = &mut self.second[idx];
                    for ((pv, &gv), (mv, vv)) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                    {
                        *mv = b1 * *mv + (F::one() - b1) * gv;
                        *vv = b2 * *vv + (F::one() - b2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        // Decoupled weight decay.
                        *pv = *pv - lr * (mhat / (vhat.sqrt() + eps) + wd * *pv);
                    }
                }
            }
        }
        Ok(())
    }
}
