//! Weighted log-likelihood passes and the masked / block-wise NELBO terms.

use crate::error::{Error, Result};
use crate::seq::MaskedState;
use crate::vocab::{TokenId, TokenSeq};

use super::config::{AttentionMode, ModelConfig};
use super::forward::{backward, forward, forward_train, ForwardCache, LogitsGrid};
use super::linalg::softmax;
use super::params::{DenoiserParams, Gradients};

/// One scored prediction: `log p(token | input)` at `pos`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub pos: usize,
    pub token: TokenId,
}

/// A single model evaluation together with the predictions read from it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringPass {
    pub input: Vec<TokenId>,
    pub prefix_len: usize,
    pub targets: Vec<Target>,
}

/// Result of evaluating a [`ScoringPass`].
pub struct PassEval {
    pub log_probs: Vec<f64>,
    logits: LogitsGrid,
    cache: Option<ForwardCache>,
}

impl ScoringPass {
    pub fn eval(&self, params: &DenoiserParams, cfg: &ModelConfig, keep_cache: bool) -> Result<PassEval> {
        if self.targets.is_empty() && !keep_cache {
            return Ok(PassEval {
                log_probs: Vec::new(),
                logits: LogitsGrid {
                    len: 0,
                    vocab: cfg.vocab_size(),
                    data: Vec::new(),
                },
                cache: None,
            });
        }
        let (logits, cache) = if keep_cache {
            let (l, c) = forward_train(params, cfg, &self.input, self.prefix_len)?;
            (l, Some(c))
        } else {
            (forward(params, cfg, &self.input, self.prefix_len)?, None)
        };
        let log_probs = self.targets.iter().map(|t| logits.log_prob(t.pos, t.token)).collect();
        Ok(PassEval {
            log_probs,
            logits,
            cache,
        })
    }

    /// Accumulates the gradient of `sum_i coeffs[i] * log_probs[i]`.
    pub fn backward(
        &self,
        params: &DenoiserParams,
        cfg: &ModelConfig,
        eval: &PassEval,
        coeffs: &[f64],
        grads: &mut Gradients,
    ) {
        assert_eq!(coeffs.len(), self.targets.len());
        let Some(cache) = eval.cache.as_ref() else {
            return;
        };
        if coeffs.iter().all(|&c| c == 0.0) {
            return;
        }
        let v = cfg.vocab_size();
        let mut dlogits = vec![0.0; self.input.len() * v];
        for (t, &c) in self.targets.iter().zip(coeffs) {
            if c == 0.0 {
                continue;
            }
            let p = softmax(eval.logits.row(t.pos));
            let row = &mut dlogits[t.pos * v..(t.pos + 1) * v];
            for (k, pk) in p.iter().enumerate() {
                row[k] -= c * pk;
            }
            row[t.token as usize] += c;
        }
        backward(params, cfg, cache, &dlogits, grads);
    }
}

/// `-(1/t) * sum over masked positions of log p(x0 | xt)` and its exact gradient.
pub fn nelbo_term(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    x0: &TokenSeq,
    xt: &MaskedState,
    t: f64,
) -> Result<(f64, Gradients)> {
    check_pair(x0, xt, t)?;
    let targets = masked_targets(x0, xt, 0..x0.len());
    weighted_nll(params, cfg, &xt.ids, 0, targets, 1.0 / t)
}

/// Block-wise term: only masked positions of block `block_index` (1-based)
/// are scored, conditioned on the clean prefix; later blocks are dropped
/// from the input entirely.
pub fn block_nelbo_term(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    x0: &TokenSeq,
    block_index: usize,
    block_len: usize,
    xt_block: &MaskedState,
    t: f64,
) -> Result<(f64, Gradients)> {
    match cfg.attention {
        AttentionMode::BlockCausal { block_len: b } if b == block_len => {}
        other => {
            return Err(Error::Config(format!(
                "block loss with block_len {block_len} needs block_causal attention, model has {other:?}"
            )))
        }
    }
    check_pair(x0, xt_block, t)?;
    let n_blocks = x0.len().div_ceil(block_len);
    if block_index == 0 || block_index > n_blocks {
        return Err(Error::Domain(format!(
            "block index {block_index} outside 1..={n_blocks}"
        )));
    }
    let start = (block_index - 1) * block_len;
    let end = (start + block_len).min(x0.len());
    let targets = masked_targets(x0, xt_block, start..end);
    weighted_nll(params, cfg, &xt_block.ids[..end], 0, targets, 1.0 / t)
}

fn check_pair(x0: &TokenSeq, xt: &MaskedState, t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!("diffusion time {t} outside (0, 1]")));
    }
    if x0.len() != xt.len() {
        return Err(Error::InvalidInput(format!(
            "clean length {} differs from corrupted length {}",
            x0.len(),
            xt.len()
        )));
    }
    Ok(())
}

fn masked_targets(x0: &TokenSeq, xt: &MaskedState, range: std::ops::Range<usize>) -> Vec<Target> {
    range
        .filter(|&i| xt.is_masked(i))
        .map(|i| Target { pos: i, token: x0.0[i] })
        .collect()
}

/// `-weight * sum log p(targets | input)` with gradient.
pub(crate) fn weighted_nll(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    input: &[TokenId],
    prefix_len: usize,
    targets: Vec<Target>,
    weight: f64,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_for(params);
    if targets.is_empty() {
        return Ok((0.0, grads));
    }
    let pass = ScoringPass {
        input: input.to_vec(),
        prefix_len,
        targets,
    };
    let eval = pass.eval(params, cfg, true)?;
    let loss = -weight * eval.log_probs.iter().sum::<f64>();
    let coeffs = vec![-weight; pass.targets.len()];
    pass.backward(params, cfg, &eval, &coeffs, &mut grads);
    Ok((loss, grads))
}
