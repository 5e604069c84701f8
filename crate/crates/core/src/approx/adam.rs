//! Bias-corrected Adam with optional L2 weight decay.

use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, MlpParams};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient before the moment update.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment accumulators for one network.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    m: Gradients,
    v: Gradients,
}

impl OptimizerState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
        }
    }
}

/// Apply one Adam update to `params` in place.
pub fn adam_step(state: &mut OptimizerState, params: &mut MlpParams, grads: &Gradients) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Training(format!(
            "non-finite gradient at optimizer step {} ({} layers)",
            state.step + 1,
            grads.weights.len()
        )));
    }
    let layers_ok = params.layers.len() == grads.weights.len()
        && params
            .layers
            .iter()
            .zip(&grads.weights)
            .all(|(l, g)| l.weight.dim() == g.dim());
    if !layers_ok {
        return Err(Error::Shape {
            context: "adam gradient",
            expected: params.num_params(),
            got: grads.weights.iter().map(|w| w.len()).sum::<usize>()
                + grads.biases.iter().map(|b| b.len()).sum::<usize>(),
        });
    }
    state.step += 1;
    let t = state.step;
    let cfg = state.config;
    for (((p, g), m), v) in params
        .slices_mut()
        .zip(grads.slices())
        .zip(state.m.slices_mut())
        .zip(state.v.slices_mut())
    {
        adam_update_slice(p, g, m, v, t, &cfg);
    }
    Ok(())
}

/// Adam for a plain parameter vector (used for the ensemble's log-variance
/// bounds).
#[derive(Clone, Debug)]
pub struct VectorAdam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl VectorAdam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if grads.len() != params.len() || params.len() != self.m.len() {
            return Err(Error::Shape {
                context: "vector adam",
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training("non-finite gradient in vector parameters".into()));
        }
        self.step += 1;
        let cfg = self.config;
        adam_update_slice(params, grads, &mut self.m, &mut self.v, self.step, &cfg);
        Ok(())
    }
}

fn adam_update_slice(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..p.len() {
        let gi = g[i] + cfg.weight_decay * p[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}
