//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::error::{Error, Result};

use super::config::{ModelConfig, Precision};
use super::params::{DenoiserParams, Gradients};

pub const FD_STEP: f64 = 1e-5;

/// Norms below this are treated as zero when forming relative errors.
const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub max_abs_error: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compares `loss_fn`'s analytic gradient against central differences for
/// every parameter tensor. `max_per_block` limits how many (evenly spaced)
/// entries of each tensor are perturbed.
///
/// The relative error of a tensor is `|a - n| / max(|a| + |n|, floor)` in
/// the L2 norm over the checked entries.
pub fn grad_check<F>(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    loss_fn: F,
    tolerance: f64,
    max_per_block: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&DenoiserParams) -> Result<(f64, Gradients)>,
{
    if cfg.precision != Precision::Double || params.precision != Precision::Double {
        return Err(Error::Config("gradient checking requires double precision".into()));
    }
    let (_, analytic) = loss_fn(params)?;
    let mut probe = params.clone();
    let mut blocks = Vec::new();
    for e in &params.layout.entries {
        let idx: Vec<usize> = match max_per_block {
            Some(n) if n < e.len => (0..n).map(|k| e.offset + k * e.len / n).collect(),
            _ => (e.offset..e.offset + e.len).collect(),
        };
        let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
        for i in idx {
            let orig = probe.data[i];
            probe.data[i] = orig + FD_STEP;
            let (up, _) = loss_fn(&probe)?;
            probe.data[i] = orig - FD_STEP;
            let (down, _) = loss_fn(&probe)?;
            probe.data[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data[i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let (an, nn) = (a2.sqrt(), n2.sqrt());
        let rel = diff2.sqrt() / (an + nn).max(REL_FLOOR);
        blocks.push(BlockReport {
            name: e.name.clone(),
            analytic_norm: an,
            numeric_norm: nn,
            max_abs_error: max_abs,
            rel_error: rel,
        });
    }
    let max_rel_error = blocks.iter().map(|b| b.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        tolerance,
        passed: max_rel_error < tolerance && analytic.is_finite(),
        blocks,
        max_rel_error,
    })
}
