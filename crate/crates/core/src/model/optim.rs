//! Adam with bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{DenoiserParams, Gradients};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(n: usize, hyper: AdamHyper) -> Self {
        Self {
            hyper,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One Adam step. Returns the L2 norm of the applied parameter change.
///
/// A gradient with any non-finite entry is rejected and leaves both the
/// parameters and the optimizer state untouched.
pub fn apply_update(
    params: &mut DenoiserParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<f64> {
    if grads.data.len() != params.data.len() || state.m.len() != params.data.len() {
        return Err(Error::InvalidInput("parameter/gradient shape mismatch".into()));
    }
    if let Some(i) = grads.data.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} is {}; update rejected",
            grads.data[i]
        )));
    }
    let AdamHyper { beta1, beta2, eps } = state.hyper;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let mut sq = 0.0;
    for i in 0..params.data.len() {
        let g = grads.data[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        let delta = lr * mhat / (vhat.sqrt() + eps);
        let before = params.data[i];
        params.data[i] -= delta;
        if delta != 0.0 {
            params.round_to_precision_at(i);
        }
        let applied = params.data[i] - before;
        sq += applied * applied;
    }
    Ok(sq.sqrt())
}
