//! AdamW: Adam moment estimates with bias correction, plus weight decay
//! applied directly to the parameters (decoupled from the gradient), so the
//! decay strength does not depend on the adaptive step size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelGrads, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must be in [0,1)".into()));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("need eps > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// First/second moment buffers, kept at 64-bit regardless of the model's
/// precision, laid out to match [`Model::trainable_slices`].
pub struct OptimizerState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<F: Scalar>(model: &Model<F>) -> Self {
        let shapes: Vec<usize> = model.trainable_slices().iter().map(|s| s.len()).collect();
        Self {
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One optimizer step over all trainable parameters. A non-finite gradient
/// aborts with an error naming the offending parameter group.
pub fn step<F: Scalar>(
    model: &mut Model<F>,
    grads: &ModelGrads<F>,
    state: &mut OptimizerState,
    lr: f64,
    config: &AdamWConfig,
) -> Result<()> {
    let names = model.trainable_names();
    let grad_slices = grads.slices();
    for (gi, group) in grad_slices.iter().enumerate() {
        if group.iter().any(|&g| !g.to_f64().is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in parameter group `{}`",
                names[gi]
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);

    let params = model.trainable_slices_mut();
    debug_assert_eq!(params.len(), grad_slices.len());
    for ((param, grad), (m, v)) in params
        .into_iter()
        .zip(&grad_slices)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..param.len() {
            let g = grad[i].to_f64();
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let p = param[i].to_f64();
            let updated = p - lr * (m_hat / (v_hat.sqrt() + config.eps) + config.weight_decay * p);
            param[i] = F::from_f64(updated);
        }
    }
    Ok(())
}
