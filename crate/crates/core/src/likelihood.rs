//! Sequence-likelihood surrogates for `log p(response | prompt)`.
//!
//! Every estimator works in two stages. [`plan_surrogate`] consumes the
//! random draws (times and mask sets) and produces a [`SurrogatePlan`]: a
//! list of model passes with the predictions to read from each and their
//! weights. The plan holds no parameters, so scoring one plan under two
//! parameter snapshots gives noise-shared scores. Gradients come from the
//! same plan.
//!
//! Response positions at or after the first eos are never masked and never
//! scored. The eos stays in the input and every later position becomes pad.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionMode, DenoiserParams, Gradients, ModelConfig, PassEval, ScoringPass, Target};
use crate::rng::RngStream;
use crate::rollout::Trajectory;
use crate::seq::{sample_t, T_EPS};
use crate::vocab::{effective_len, TokenSeq};

pub const DEFAULT_MC_SAMPLES: usize = 16;
pub const ORACLE_MAX_LEN: usize = 12;
pub const ORACLE_NODES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    McElbo,
    OneStep,
    CoupledPair,
    BlockElbo,
    Trajectory,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::McElbo => "mc_elbo",
            Self::OneStep => "one_step",
            Self::CoupledPair => "coupled_pair",
            Self::BlockElbo => "block_elbo",
            Self::Trajectory => "trajectory",
        }
    }

    /// Kinds whose value is a Monte Carlo ELBO estimate.
    pub fn is_mc(self) -> bool {
        matches!(self, Self::McElbo | Self::OneStep | Self::BlockElbo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeSampling {
    /// t ~ U(eps, 1].
    Uniform,
    Fixed {
        t: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub mc_samples: usize,
    pub t_sampling: TimeSampling,
    /// Coupled pair only: weight the passes by 1/t and 1/(1-t).
    pub weighted_pair: bool,
    /// Reuse the same draws for every score of one response.
    pub shared_noise: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self::mc_elbo(DEFAULT_MC_SAMPLES)
    }
}

impl EstimatorConfig {
    pub fn mc_elbo(k: usize) -> Self {
        Self {
            kind: EstimatorKind::McElbo,
            mc_samples: k,
            t_sampling: TimeSampling::Uniform,
            weighted_pair: false,
            shared_noise: true,
        }
    }

    /// Single sample; fully masked (t = 1) unless `fixed_t` is `None`.
    pub fn one_step(fixed_t: Option<f64>) -> Self {
        Self {
            kind: EstimatorKind::OneStep,
            mc_samples: 1,
            t_sampling: fixed_t.map_or(TimeSampling::Uniform, |t| TimeSampling::Fixed { t }),
            ..Self::mc_elbo(1)
        }
    }

    pub fn coupled_pair() -> Self {
        Self {
            kind: EstimatorKind::CoupledPair,
            mc_samples: 1,
            ..Self::mc_elbo(1)
        }
    }

    pub fn block_elbo(k: usize) -> Self {
        Self {
            kind: EstimatorKind::BlockElbo,
            ..Self::mc_elbo(k)
        }
    }

    pub fn trajectory() -> Self {
        Self {
            kind: EstimatorKind::Trajectory,
            mc_samples: 1,
            ..Self::mc_elbo(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if self.kind == EstimatorKind::OneStep && self.mc_samples != 1 {
            return Err(Error::Config("one_step uses exactly one sample".into()));
        }
        if let TimeSampling::Fixed { t } = self.t_sampling {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("fixed t = {t} outside (0, 1]")));
            }
        }
        Ok(())
    }

    fn draw_t(&self, rng: &mut RngStream) -> f64 {
        match self.t_sampling {
            TimeSampling::Uniform => sample_t(rng),
            TimeSampling::Fixed { t } => t,
        }
    }
}

/// One pass of a plan. Its contribution to sample `sample` is
/// `weight * sum(log p(targets))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedPass {
    pub pass: ScoringPass,
    pub sample: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogatePlan {
    pub kind: EstimatorKind,
    pub passes: Vec<PlannedPass>,
    pub n_samples: usize,
    pub prompt_len: usize,
    /// Number of scored response positions (before the first eos).
    pub scored_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateScore {
    pub kind: EstimatorKind,
    pub value: f64,
    /// Per-sample terms; `value` is their mean.
    pub terms: Vec<f64>,
    /// Contribution of each scored response position; sums to `value`.
    pub per_token: Vec<f64>,
}

pub struct PlanEval {
    pub score: SurrogateScore,
    evals: Vec<PassEval>,
}

impl SurrogatePlan {
    pub fn empty(kind: EstimatorKind, prompt_len: usize) -> Self {
        Self {
            kind,
            passes: Vec::new(),
            n_samples: 1,
            prompt_len,
            scored_len: 0,
        }
    }

    fn coeff(&self, p: &PlannedPass) -> f64 {
        p.weight / self.n_samples as f64
    }

    pub fn evaluate(&self, params: &DenoiserParams, cfg: &ModelConfig, keep_cache: bool) -> Result<PlanEval> {
        let evals = self
            .passes
            .par_iter()
            .map(|p| p.pass.eval(params, cfg, keep_cache))
            .collect::<Result<Vec<_>>>()?;
        let mut terms = vec![0.0; self.n_samples];
        let mut per_token = vec![0.0; self.scored_len];
        for (p, e) in self.passes.iter().zip(&evals) {
            let c = self.coeff(p);
            for (t, &lp) in p.pass.targets.iter().zip(&e.log_probs) {
                terms[p.sample] += p.weight * lp;
                per_token[t.pos - self.prompt_len] += c * lp;
            }
        }
        let value = terms.iter().sum::<f64>() / self.n_samples as f64;
        Ok(PlanEval {
            score: SurrogateScore {
                kind: self.kind,
                value,
                terms,
                per_token,
            },
            evals,
        })
    }

    pub fn score(&self, params: &DenoiserParams, cfg: &ModelConfig) -> Result<SurrogateScore> {
        Ok(self.evaluate(params, cfg, false)?.score)
    }

    /// Accumulates the gradient of `sum_l token_weights[l] * per_token[l]`.
    /// `eval` must come from `evaluate(.., keep_cache = true)`.
    pub fn backward(
        &self,
        params: &DenoiserParams,
        cfg: &ModelConfig,
        eval: &PlanEval,
        token_weights: &[f64],
        grads: &mut Gradients,
    ) {
        assert_eq!(token_weights.len(), self.scored_len);
        for (p, e) in self.passes.iter().zip(&eval.evals) {
            let c = self.coeff(p);
            let coeffs: Vec<f64> = p
                .pass
                .targets
                .iter()
                .map(|t| c * token_weights[t.pos - self.prompt_len])
                .collect();
            p.pass.backward(params, cfg, e, &coeffs, grads);
        }
    }

    /// Value and gradient of `scale * value`.
    pub fn value_and_grad(
        &self,
        params: &DenoiserParams,
        cfg: &ModelConfig,
        scale: f64,
    ) -> Result<(SurrogateScore, Gradients)> {
        let eval = self.evaluate(params, cfg, true)?;
        let mut g = Gradients::zeros_for(params);
        self.backward(params, cfg, &eval, &vec![scale; self.scored_len], &mut g);
        Ok((eval.score, g))
    }

    /// Every scored position appears in exactly one pass per sample.
    pub fn covers_each_once(&self) -> bool {
        let mut seen = vec![vec![0usize; self.scored_len]; self.n_samples];
        for p in &self.passes {
            for t in &p.pass.targets {
                seen[p.sample][t.pos - self.prompt_len] += 1;
            }
        }
        seen.iter().flatten().all(|&c| c == 1)
    }
}

/// Draws the noise of `est` for one (prompt, response) pair. The trajectory
/// estimator needs `trajectory` and ignores `response` and `rng`.
pub fn plan_surrogate(
    cfg: &ModelConfig,
    est: &EstimatorConfig,
    prompt: &TokenSeq,
    response: &TokenSeq,
    trajectory: Option<&Trajectory>,
    rng: &mut RngStream,
) -> Result<SurrogatePlan> {
    est.validate()?;
    match est.kind {
        EstimatorKind::McElbo | EstimatorKind::OneStep => plan_mc(cfg, est, prompt, response, rng),
        EstimatorKind::CoupledPair => {
            let s = scored_len(cfg, prompt, response)?;
            let t = rng.uniform_left_open(T_EPS, 1.0 - T_EPS);
            let in_a: Vec<bool> = (0..s).map(|_| rng.uniform() < t).collect();
            plan_coupled(cfg, prompt, response, &in_a, t, est.weighted_pair)
        }
        EstimatorKind::BlockElbo => plan_block(cfg, est, prompt, response, rng),
        EstimatorKind::Trajectory => {
            let traj =
                trajectory.ok_or_else(|| Error::Config("trajectory estimator needs a recorded trajectory".into()))?;
            plan_trajectory(cfg, traj, prompt)
        }
    }
}

/// Plans and scores in one call.
pub fn estimate(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    est: &EstimatorConfig,
    prompt: &TokenSeq,
    response: &TokenSeq,
    trajectory: Option<&Trajectory>,
    rng: &mut RngStream,
) -> Result<SurrogateScore> {
    plan_surrogate(cfg, est, prompt, response, trajectory, rng)?.score(params, cfg)
}

pub fn mc_elbo(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    prompt: &TokenSeq,
    response: &TokenSeq,
    est: &EstimatorConfig,
    rng: &mut RngStream,
) -> Result<SurrogateScore> {
    let est = EstimatorConfig {
        kind: EstimatorKind::McElbo,
        ..est.clone()
    };
    estimate(params, cfg, &est, prompt, response, None, rng)
}

pub fn one_step(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    prompt: &TokenSeq,
    response: &TokenSeq,
    fixed_t: Option<f64>,
    rng: &mut RngStream,
) -> Result<SurrogateScore> {
    estimate(
        params,
        cfg,
        &EstimatorConfig::one_step(fixed_t),
        prompt,
        response,
        None,
        rng,
    )
}

pub fn coupled_pair(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    prompt: &TokenSeq,
    response: &TokenSeq,
    rng: &mut RngStream,
) -> Result<SurrogateScore> {
    estimate(
        params,
        cfg,
        &EstimatorConfig::coupled_pair(),
        prompt,
        response,
        None,
        rng,
    )
}

/// Coupled pair with an explicit pass-A mask set (`in_a[l]` for each scored
/// position) and its time.
pub fn coupled_pair_with_mask(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    prompt: &TokenSeq,
    response: &TokenSeq,
    in_a: &[bool],
    t: f64,
    weighted: bool,
) -> Result<SurrogateScore> {
    plan_coupled(cfg, prompt, response, in_a, t, weighted)?.score(params, cfg)
}

pub fn block_elbo(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    prompt: &TokenSeq,
    response: &TokenSeq,
    est: &EstimatorConfig,
    rng: &mut RngStream,
) -> Result<SurrogateScore> {
    let est = EstimatorConfig {
        kind: EstimatorKind::BlockElbo,
        ..est.clone()
    };
    estimate(params, cfg, &est, prompt, response, None, rng)
}

pub fn trajectory_logprob(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    trajectory: &Trajectory,
    prompt: &TokenSeq,
) -> Result<SurrogateScore> {
    plan_trajectory(cfg, trajectory, prompt)?.score(params, cfg)
}

fn scored_len(cfg: &ModelConfig, prompt: &TokenSeq, response: &TokenSeq) -> Result<usize> {
    let v = &cfg.vocab;
    let total = prompt.len() + response.len();
    if total > cfg.max_len {
        return Err(Error::Domain(format!(
            "sequence length {total} exceeds max_len {}",
            cfg.max_len
        )));
    }
    if prompt.ids().iter().chain(response.ids()).any(|&t| t == v.mask_id) {
        return Err(Error::InvalidInput("clean sequence contains the mask token".into()));
    }
    Ok(effective_len(response.ids(), v.eos_id))
}

/// The response as the estimators see it: tokens after the first eos are pad.
fn scoring_response(cfg: &ModelConfig, response: &TokenSeq) -> Vec<u32> {
    let v = &cfg.vocab;
    let mut r = response.0.clone();
    let e = effective_len(&r, v.eos_id);
    for t in r.iter_mut().skip(e + 1) {
        *t = v.pad_id;
    }
    r
}

fn masked_pass(prompt: &TokenSeq, response: &[u32], masked: impl Iterator<Item = usize>, mask_id: u32) -> ScoringPass {
    let p = prompt.len();
    let mut input = prompt.0.clone();
    input.extend_from_slice(response);
    let mut targets = Vec::new();
    for l in masked {
        targets.push(Target {
            pos: p + l,
            token: response[l],
        });
        input[p + l] = mask_id;
    }
    ScoringPass {
        input,
        prefix_len: p,
        targets,
    }
}

fn plan_mc(
    cfg: &ModelConfig,
    est: &EstimatorConfig,
    prompt: &TokenSeq,
    response: &TokenSeq,
    rng: &mut RngStream,
) -> Result<SurrogatePlan> {
    let s = scored_len(cfg, prompt, response)?;
    let r = scoring_response(cfg, response);
    let k = est.mc_samples;
    let mut plan = SurrogatePlan {
        kind: est.kind,
        passes: Vec::with_capacity(k),
        n_samples: k,
        prompt_len: prompt.len(),
        scored_len: s,
    };
    if s == 0 {
        return Ok(plan);
    }
    for i in 0..k {
        let t = est.draw_t(rng);
        let masked: Vec<usize> = (0..s).filter(|_| rng.uniform() < t).collect();
        plan.passes.push(PlannedPass {
            pass: masked_pass(prompt, &r, masked.into_iter(), cfg.vocab.mask_id),
            sample: i,
            weight: 1.0 / t,
        });
    }
    Ok(plan)
}

fn plan_coupled(
    cfg: &ModelConfig,
    prompt: &TokenSeq,
    response: &TokenSeq,
    in_a: &[bool],
    t: f64,
    weighted: bool,
) -> Result<SurrogatePlan> {
    let s = scored_len(cfg, prompt, response)?;
    if in_a.len() != s {
        return Err(Error::InvalidInput(format!(
            "mask set covers {} positions, response scores {s}",
            in_a.len()
        )));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("coupled time {t} outside (0, 1)")));
    }
    let mut plan = SurrogatePlan {
        kind: EstimatorKind::CoupledPair,
        passes: Vec::with_capacity(2),
        n_samples: 1,
        prompt_len: prompt.len(),
        scored_len: s,
    };
    if s == 0 {
        return Ok(plan);
    }
    let (wa, wb) = if weighted {
        (0.5 / t, 0.5 / (1.0 - t))
    } else {
        (1.0, 1.0)
    };
    let m = cfg.vocab.mask_id;
    let r = scoring_response(cfg, response);
    let a = (0..s).filter(|&l| in_a[l]);
    let b = (0..s).filter(|&l| !in_a[l]);
    plan.passes.push(PlannedPass {
        pass: masked_pass(prompt, &r, a, m),
        sample: 0,
        weight: wa,
    });
    plan.passes.push(PlannedPass {
        pass: masked_pass(prompt, &r, b, m),
        sample: 0,
        weight: wb,
    });
    assert!(plan.covers_each_once(), "coupled passes must cover every token once");
    Ok(plan)
}

fn plan_block(
    cfg: &ModelConfig,
    est: &EstimatorConfig,
    prompt: &TokenSeq,
    response: &TokenSeq,
    rng: &mut RngStream,
) -> Result<SurrogatePlan> {
    let bl = match cfg.attention {
        AttentionMode::BlockCausal { block_len } => block_len,
        AttentionMode::Bidirectional => return Err(Error::Config("block_elbo needs a block_causal model".into())),
    };
    let s = scored_len(cfg, prompt, response)?;
    let k = est.mc_samples;
    let mut plan = SurrogatePlan {
        kind: EstimatorKind::BlockElbo,
        passes: Vec::new(),
        n_samples: k,
        prompt_len: prompt.len(),
        scored_len: s,
    };
    let p = prompt.len();
    let r = scoring_response(cfg, response);
    for start in (0..s).step_by(bl) {
        let end = (start + bl).min(r.len());
        let scored_end = end.min(s);
        for i in 0..k {
            let t = est.draw_t(rng);
            let masked: Vec<usize> = (start..scored_end).filter(|_| rng.uniform() < t).collect();
            let mut pass = masked_pass(prompt, &r[..end], masked.into_iter(), cfg.vocab.mask_id);
            pass.prefix_len = p;
            plan.passes.push(PlannedPass {
                pass,
                sample: i,
                weight: 1.0 / t,
            });
        }
    }
    Ok(plan)
}

fn plan_trajectory(cfg: &ModelConfig, traj: &Trajectory, prompt: &TokenSeq) -> Result<SurrogatePlan> {
    let v = &cfg.vocab;
    if traj.mask_id != v.mask_id || traj.eos_id != v.eos_id || traj.prompt_len != prompt.len() {
        return Err(Error::Integrity(
            "trajectory was recorded against a different vocabulary or prompt".into(),
        ));
    }
    let p = prompt.len();
    let end = traj.scored_end();
    let mut plan = SurrogatePlan {
        kind: EstimatorKind::Trajectory,
        passes: Vec::with_capacity(traj.steps.len()),
        n_samples: 1,
        prompt_len: p,
        scored_len: end - p,
    };
    for (n, step) in traj.steps.iter().enumerate() {
        let sb = &step.state_before;
        if sb.len() > cfg.max_len || sb.len() < p || sb[..p] != prompt.0[..] {
            return Err(Error::Integrity(format!(
                "step {n} is incompatible with the prompt or model length"
            )));
        }
        if step.positions.len() != step.tokens.len() {
            return Err(Error::Integrity(format!("step {n} has ragged records")));
        }
        let mut targets = Vec::new();
        for (&pos, &tok) in step.positions.iter().zip(&step.tokens) {
            if pos < p || pos >= sb.len() || sb[pos] != v.mask_id || tok as usize >= v.size() {
                return Err(Error::Integrity(format!(
                    "step {n} places a token at an invalid position {pos}"
                )));
            }
            if pos < end {
                targets.push(Target { pos, token: tok });
            }
        }
        plan.passes.push(PlannedPass {
            pass: ScoringPass {
                input: sb.clone(),
                prefix_len: p,
                targets,
            },
            sample: 0,
            weight: 1.0,
        });
    }
    Ok(plan)
}

/// Gauss–Legendre nodes and weights on `[lo, hi]`.
pub fn gauss_legendre(n: usize, lo: f64, hi: f64) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let half = (hi - lo) / 2.0;
    let mid = (hi + lo) / 2.0;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for j in 2..=n {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * z * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
                p1 = z;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = mid - half * z;
        x[n - 1 - i] = mid + half * z;
        w[i] = wi * half;
        w[n - 1 - i] = wi * half;
    }
    (x, w)
}

/// `E_t E_{x_t}[(1/t) sum_{masked} log p]` with t ~ U(eps, 1], by weighting
/// mask-set sizes with a quadrature rule of `nodes` points.
fn size_weights(len: usize, nodes: usize) -> Vec<f64> {
    let (x, w) = gauss_legendre(nodes, T_EPS, 1.0);
    (0..=len)
        .map(|m| {
            if m == 0 {
                return 0.0;
            }
            x.iter()
                .zip(&w)
                .map(|(&t, &wt)| wt * t.powi(m as i32 - 1) * (1.0 - t).powi((len - m) as i32))
                .sum::<f64>()
                / (1.0 - T_EPS)
        })
        .collect()
}

/// Exact expected value of the masked ELBO estimator by enumerating every
/// mask subset of the scored response.
pub fn exact_elbo_oracle(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    prompt: &TokenSeq,
    response: &TokenSeq,
) -> Result<f64> {
    let s = scored_len(cfg, prompt, response)?;
    if s > ORACLE_MAX_LEN {
        return Err(Error::Domain(format!(
            "oracle enumerates 2^{s} subsets; limit is length {ORACLE_MAX_LEN}"
        )));
    }
    if s == 0 {
        return Ok(0.0);
    }
    let r = scoring_response(cfg, response);
    let subset_sums: Vec<(usize, f64)> = (1u32..(1 << s))
        .into_par_iter()
        .map(|bits| {
            let masked = (0..s).filter(|&l| bits & (1 << l) != 0);
            let pass = masked_pass(prompt, &r, masked, cfg.vocab.mask_id);
            let e = pass.eval(params, cfg, false)?;
            Ok((bits.count_ones() as usize, e.log_probs.iter().sum()))
        })
        .collect::<Result<_>>()?;
    let total = |w: &[f64]| subset_sums.iter().map(|&(m, v)| w[m] * v).sum::<f64>();
    let value = total(&size_weights(s, ORACLE_NODES));
    let check = total(&size_weights(s, 2 * ORACLE_NODES));
    if (value - check).abs() >= 1e-6 {
        return Err(Error::NonFinite(format!(
            "oracle quadrature did not converge: {value} vs {check}"
        )));
    }
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRecord {
    pub estimator: EstimatorKind,
    pub k: usize,
    pub mean: f64,
    pub var: f64,
    pub se: f64,
    pub reps: usize,
}

/// Sample statistics of the estimator value over `reps` independent child
/// streams of `rng`.
#[allow(clippy::too_many_arguments)]
pub fn variance_probe(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    est: &EstimatorConfig,
    prompt: &TokenSeq,
    response: &TokenSeq,
    trajectory: Option<&Trajectory>,
    reps: usize,
    rng: &RngStream,
) -> Result<VarianceRecord> {
    if reps < 2 {
        return Err(Error::InvalidInput("variance probe needs at least 2 reps".into()));
    }
    let values = (0..reps)
        .into_par_iter()
        .map(|r| estimate(params, cfg, est, prompt, response, trajectory, &mut rng.child(r)).map(|s| s.value))
        .collect::<Result<Vec<_>>>()?;
    let (mean, var) = mean_var(&values);
    Ok(VarianceRecord {
        estimator: est.kind,
        k: est.mc_samples,
        mean,
        var,
        se: (var / reps as f64).sqrt(),
        reps,
    })
}

/// Mean and unbiased sample variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocab;

    fn setup(mode: AttentionMode) -> (ModelConfig, DenoiserParams) {
        let cfg = ModelConfig::tiny(Vocab::from_content("abcdef").unwrap()).with_attention(mode);
        let mut p = DenoiserParams::init(&cfg, &mut RngStream::new(5, "init")).unwrap();
        for x in &mut p.data {
            *x *= 10.0;
        }
        (cfg, p)
    }

    fn uniform(mode: AttentionMode) -> (ModelConfig, DenoiserParams) {
        let (cfg, mut p) = setup(mode);
        p.make_uniform();
        (cfg, p)
    }

    fn ex() -> (TokenSeq, TokenSeq) {
        (TokenSeq(vec![4, 5]), TokenSeq(vec![6, 7, 8, 9, 4]))
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(64, 0.0, 1.0);
        for deg in [0, 1, 5, 30, 127] {
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg)).sum();
            assert!((q - 1.0 / (deg as f64 + 1.0)).abs() < 1e-13, "deg {deg}: {q}");
        }
        let (x1, w1) = gauss_legendre(1, -1.0, 1.0);
        assert!(x1[0].abs() < 1e-15 && (w1[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_response_scores_zero() {
        let (cfg, p) = setup(AttentionMode::Bidirectional);
        let (pr, _) = ex();
        let mut r = RngStream::new(0, "e");
        let e = TokenSeq(vec![]);
        assert_eq!(
            mc_elbo(&p, &cfg, &pr, &e, &EstimatorConfig::default(), &mut r)
                .unwrap()
                .value,
            0.0
        );
        assert_eq!(coupled_pair(&p, &cfg, &pr, &e, &mut r).unwrap().value, 0.0);
        assert_eq!(exact_elbo_oracle(&p, &cfg, &pr, &e).unwrap(), 0.0);
        // eos first: nothing is scored
        let eos = TokenSeq(vec![cfg.vocab.eos_id, 6]);
        assert_eq!(one_step(&p, &cfg, &pr, &eos, None, &mut r).unwrap().value, 0.0);
    }

    #[test]
    fn one_step_full_mask_and_degeneracy() {
        let (cfg, p) = setup(AttentionMode::Bidirectional);
        let (pr, rs) = ex();
        let s = one_step(&p, &cfg, &pr, &rs, Some(1.0), &mut RngStream::new(0, "a")).unwrap();
        let full = masked_pass(&pr, rs.ids(), 0..rs.len(), cfg.vocab.mask_id);
        let direct: f64 = full.eval(&p, &cfg, false).unwrap().log_probs.iter().sum();
        assert!((s.value - direct).abs() < 1e-12);
        let a = one_step(&p, &cfg, &pr, &rs, None, &mut RngStream::new(3, "n")).unwrap();
        let b = mc_elbo(
            &p,
            &cfg,
            &pr,
            &rs,
            &EstimatorConfig::mc_elbo(1),
            &mut RngStream::new(3, "n"),
        )
        .unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn uniform_predictor_closed_forms() {
        let (cfg, p) = uniform(AttentionMode::Bidirectional);
        let (pr, rs) = ex();
        let target = -(rs.len() as f64) * (cfg.vocab_size() as f64).ln();
        let o = exact_elbo_oracle(&p, &cfg, &pr, &rs).unwrap();
        assert!((o - target).abs() < 1e-6);
        let s = one_step(&p, &cfg, &pr, &rs, Some(1.0), &mut RngStream::new(0, "a")).unwrap();
        assert!((s.value - target).abs() < 1e-9);
        for seed in 0..5 {
            let c = coupled_pair(&p, &cfg, &pr, &rs, &mut RngStream::new(seed, "c")).unwrap();
            assert!((c.value - target).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_single_token_is_log_prob() {
        let (cfg, p) = setup(AttentionMode::Bidirectional);
        let (pr, _) = ex();
        let rs = TokenSeq(vec![7]);
        let direct: f64 = masked_pass(&pr, rs.ids(), 0..1, cfg.vocab.mask_id)
            .eval(&p, &cfg, false)
            .unwrap()
            .log_probs[0];
        let o = exact_elbo_oracle(&p, &cfg, &pr, &rs).unwrap();
        assert!((o - direct).abs() < 1e-12, "{o} vs {direct}");
        let long = TokenSeq(vec![6; 13]);
        assert!(matches!(exact_elbo_oracle(&p, &cfg, &pr, &long), Err(Error::Domain(_))));
    }

    #[test]
    fn mc_elbo_is_unbiased_for_oracle() {
        let (cfg, p) = setup(AttentionMode::Bidirectional);
        let (pr, rs) = ex();
        let o = exact_elbo_oracle(&p, &cfg, &pr, &rs).unwrap();
        let rec = variance_probe(
            &p,
            &cfg,
            &EstimatorConfig::mc_elbo(4),
            &pr,
            &rs,
            None,
            4000,
            &RngStream::new(1, "v"),
        )
        .unwrap();
        assert!((rec.mean - o).abs() < 4.0 * rec.se, "{rec:?} vs {o}");
    }

    #[test]
    fn coupled_pair_explicit_mask() {
        let (cfg, p) = setup(AttentionMode::Bidirectional);
        let (pr, _) = ex();
        let rs = TokenSeq(vec![6, 7]);
        let s = coupled_pair_with_mask(&p, &cfg, &pr, &rs, &[true, false], 0.5, false).unwrap();
        let m = cfg.vocab.mask_id;
        let a = ScoringPass {
            input: vec![4, 5, m, 7],
            prefix_len: 2,
            targets: vec![Target { pos: 2, token: 6 }],
        };
        let b = ScoringPass {
            input: vec![4, 5, 6, m],
            prefix_len: 2,
            targets: vec![Target { pos: 3, token: 7 }],
        };
        let want = a.eval(&p, &cfg, false).unwrap().log_probs[0] + b.eval(&p, &cfg, false).unwrap().log_probs[0];
        assert!((s.value - want).abs() < 1e-12);
        let plan = plan_surrogate(
            &cfg,
            &EstimatorConfig::coupled_pair(),
            &pr,
            &ex().1,
            None,
            &mut RngStream::new(2, "c"),
        )
        .unwrap();
        assert!(plan.covers_each_once());
    }

    #[test]
    fn block_single_block_matches_mc() {
        let (cfg, p) = setup(AttentionMode::Bidirectional);
        let bc = cfg.clone().with_attention(AttentionMode::BlockCausal { block_len: 8 });
        let (pr, rs) = ex();
        let est = EstimatorConfig::mc_elbo(6);
        let a = mc_elbo(&p, &cfg, &pr, &rs, &est, &mut RngStream::new(7, "b")).unwrap();
        let b = block_elbo(&p, &bc, &pr, &rs, &est, &mut RngStream::new(7, "b")).unwrap();
        assert!((a.value - b.value).abs() < 1e-10);
        assert!(matches!(
            block_elbo(&p, &cfg, &pr, &rs, &est, &mut RngStream::new(7, "b")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn block_elbo_uniform_mean() {
        let (cfg, p) = uniform(AttentionMode::BlockCausal { block_len: 2 });
        let (pr, rs) = ex();
        let target = -(rs.len() as f64) * (cfg.vocab_size() as f64).ln();
        let rec = variance_probe(
            &p,
            &cfg,
            &EstimatorConfig::block_elbo(2),
            &pr,
            &rs,
            None,
            3000,
            &RngStream::new(1, "v"),
        )
        .unwrap();
        assert!((rec.mean - target).abs() < 3.0 * rec.se, "{rec:?}");
    }

    #[test]
    fn per_token_sums_to_value_and_gradient_matches_fd() {
        let (cfg, p) = setup(AttentionMode::Bidirectional);
        let (pr, rs) = ex();
        for est in [EstimatorConfig::mc_elbo(3), EstimatorConfig::coupled_pair()] {
            let plan = plan_surrogate(&cfg, &est, &pr, &rs, None, &mut RngStream::new(4, "g")).unwrap();
            let (s, g) = plan.value_and_grad(&p, &cfg, 1.0).unwrap();
            assert!((s.per_token.iter().sum::<f64>() - s.value).abs() < 1e-10);
            // directional derivative along the gradient
            let h = 1e-5;
            let n = g.norm();
            let shifted = |sign: f64| {
                let mut q = p.clone();
                for (x, d) in q.data.iter_mut().zip(&g.data) {
                    *x += sign * h * d / n;
                }
                plan.score(&q, &cfg).unwrap().value
            };
            let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            assert!((fd - n).abs() / n < 1e-4, "{fd} vs {n}");
        }
    }

    #[test]
    fn shared_plan_gives_identical_scores() {
        let (cfg, p) = setup(AttentionMode::Bidirectional);
        let (pr, rs) = ex();
        let est = EstimatorConfig::mc_elbo(4);
        let a = plan_surrogate(&cfg, &est, &pr, &rs, None, &mut RngStream::new(1, "k")).unwrap();
        let b = plan_surrogate(&cfg, &est, &pr, &rs, None, &mut RngStream::new(1, "k")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.score(&p, &cfg).unwrap(), b.score(&p, &cfg).unwrap());
    }

    #[test]
    fn tokens_after_eos_are_ignored() {
        let (cfg, p) = setup(AttentionMode::Bidirectional);
        let (pr, _) = ex();
        let e = cfg.vocab.eos_id;
        let a = TokenSeq(vec![6, 7, e, 8, 9]);
        let b = TokenSeq(vec![6, 7, e, 4, 4]);
        let est = EstimatorConfig::mc_elbo(3);
        let sa = mc_elbo(&p, &cfg, &pr, &a, &est, &mut RngStream::new(1, "q")).unwrap();
        let sb = mc_elbo(&p, &cfg, &pr, &b, &est, &mut RngStream::new(1, "q")).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(sa.per_token.len(), 2);
        let oa = exact_elbo_oracle(&p, &cfg, &pr, &a).unwrap();
        assert_eq!(oa, exact_elbo_oracle(&p, &cfg, &pr, &b).unwrap());
    }

    #[test]
    fn variance_probe_requires_two_reps() {
        let (cfg, p) = setup(AttentionMode::Bidirectional);
        let (pr, rs) = ex();
        assert!(variance_probe(
            &p,
            &cfg,
            &EstimatorConfig::default(),
            &pr,
            &rs,
            None,
            1,
            &RngStream::new(0, "x")
        )
        .is_err());
        let r = variance_probe(
            &p,
            &cfg,
            &EstimatorConfig::one_step(Some(1.0)),
            &pr,
            &rs,
            None,
            5,
            &RngStream::new(0, "x"),
        )
        .unwrap();
        assert_eq!(r.var, 0.0);
    }
}
