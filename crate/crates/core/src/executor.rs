//! Group-relative policy optimization with pluggable hooks.
//!
//! One step: sample a group of responses per prompt, score them with the
//! task verifier, compute old-policy surrogate scores, normalize rewards
//! into advantages, then take a single clipped-ratio update. Algorithms
//! differ only in the [`AlgorithmSpec`] hooks.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{
    plan_surrogate, variance_probe, EstimatorConfig, EstimatorKind, PlanEval, SurrogatePlan, SurrogateScore,
};
use crate::model::{DenoiserParams, Gradients, ModelConfig};
use crate::rng::RngStream;
use crate::rollout::{DenoisePlan, RolloutResult, SamplerConfig, Selection};
use crate::seq::NoiseSchedule;
use crate::tasks::{Reward, TaskInstance};
use crate::train::{finish_step, mean_std, Flow, MetricsRecord, OptimConfig, RunHooks, TrainState};
use crate::vocab::TokenSeq;

pub const DEFAULT_GROUP_SIZE: usize = 8;
pub const DEFAULT_CLIP: f64 = 0.2;
pub const EPS_STD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryRule {
    /// Score responses by fresh forward corruption.
    #[default]
    FreshCorruption,
    /// Score the recorded denoising trajectory.
    RecordedTrajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioLevel {
    #[default]
    Sequence,
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyLossConfig {
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub ratio_level: RatioLevel,
}

impl Default for PolicyLossConfig {
    fn default() -> Self {
        Self {
            clip_eps: DEFAULT_CLIP,
            kl_coef: 0.0,
            ratio_level: RatioLevel::Sequence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmSpec {
    pub name: String,
    pub forward_process: NoiseSchedule,
    pub trajectory_rule: TrajectoryRule,
    pub likelihood: EstimatorConfig,
    pub policy_loss: PolicyLossConfig,
}

impl Default for AlgorithmSpec {
    fn default() -> Self {
        Self::preset("mc_elbo_grpo").expect("built-in preset")
    }
}

impl AlgorithmSpec {
    pub const PRESETS: [&'static str; 5] = [
        "d1",
        "coupled_grpo",
        "mc_elbo_grpo",
        "block_elbo_grpo",
        "trajectory_grpo",
    ];

    pub fn preset(name: &str) -> Result<Self> {
        let (likelihood, rule) = match name {
            "d1" => (EstimatorConfig::one_step(Some(1.0)), TrajectoryRule::FreshCorruption),
            "coupled_grpo" => (EstimatorConfig::coupled_pair(), TrajectoryRule::FreshCorruption),
            "mc_elbo_grpo" => (EstimatorConfig::default(), TrajectoryRule::FreshCorruption),
            "block_elbo_grpo" => (
                EstimatorConfig::block_elbo(crate::likelihood::DEFAULT_MC_SAMPLES),
                TrajectoryRule::FreshCorruption,
            ),
            "trajectory_grpo" => (EstimatorConfig::trajectory(), TrajectoryRule::RecordedTrajectory),
            other => {
                return Err(Error::Config(format!(
                    "unknown algorithm preset {other:?}; known: {:?}",
                    Self::PRESETS
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            forward_process: NoiseSchedule::Linear,
            trajectory_rule: rule,
            likelihood,
            policy_loss: PolicyLossConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.likelihood.validate()?;
        let pl = &self.policy_loss;
        if !(pl.kl_coef >= 0.0 && pl.kl_coef.is_finite()) {
            return Err(Error::Config(format!("kl_coef {} must be >= 0", pl.kl_coef)));
        }
        if !(pl.clip_eps > 0.0 && pl.clip_eps < 1.0) {
            return Err(Error::Config(format!("clip_eps {} outside (0, 1)", pl.clip_eps)));
        }
        let recorded = self.trajectory_rule == TrajectoryRule::RecordedTrajectory;
        if recorded != (self.likelihood.kind == EstimatorKind::Trajectory) {
            return Err(Error::Config(
                "the recorded-trajectory rule goes with the trajectory estimator and only with it".into(),
            ));
        }
        Ok(())
    }
}

/// One response of a group with everything computed before the update.
#[derive(Debug, Clone)]
pub struct ScoredRollout {
    pub rollout: RolloutResult,
    pub reward: Reward,
    pub plan: SurrogatePlan,
    pub old: SurrogateScore,
    pub reference: Option<SurrogateScore>,
}

#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub prompt_index: u64,
    pub prompt: TokenSeq,
    pub members: Vec<ScoredRollout>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.reward.value).collect()
    }
}

/// Rollout `i` of prompt `prompt_index` draws from
/// `RngStream(seed, "rollout") / prompt_index / i`; its estimator noise
/// from `RngStream(seed, "noise") / prompt_index / i`.
#[allow(clippy::too_many_arguments)]
pub fn run_group(
    params: &DenoiserParams,
    reference: Option<&DenoiserParams>,
    cfg: &ModelConfig,
    alg: &AlgorithmSpec,
    sampler: &SamplerConfig,
    instance: &TaskInstance,
    prompt_index: u64,
    group_size: usize,
    seed: u64,
    parallel: bool,
) -> Result<RolloutGroup> {
    if group_size < 2 {
        return Err(Error::Config("group size must be at least 2".into()));
    }
    let prompt = cfg.vocab.encode(&instance.prompt)?;
    let one = |i: usize| -> Result<ScoredRollout> {
        let mut r = RngStream::new(seed, "rollout").child(prompt_index).child(i);
        let rollout = sampler.sample(params, cfg, &prompt, &mut r)?;
        let mut reward = instance.verify(&cfg.vocab, &rollout.response);
        reward.value = reward.value.clamp(0.0, 1.0);
        let mut noise = RngStream::new(seed, "noise").child(prompt_index).child(i);
        let plan = plan_surrogate(
            cfg,
            &alg.likelihood,
            &prompt,
            &rollout.response,
            Some(&rollout.trajectory),
            &mut noise,
        )?;
        let old = plan.score(params, cfg)?;
        let reference = match reference {
            Some(rp) if alg.policy_loss.kl_coef > 0.0 => Some(plan.score(rp, cfg)?),
            _ => None,
        };
        Ok(ScoredRollout {
            rollout,
            reward,
            plan,
            old,
            reference,
        })
    };
    let members = if parallel {
        (0..group_size).into_par_iter().map(one).collect::<Result<Vec<_>>>()?
    } else {
        (0..group_size).map(one).collect::<Result<Vec<_>>>()?
    };
    let rewards: Vec<f64> = members.iter().map(|m| m.reward.value).collect();
    Ok(RolloutGroup {
        prompt_index,
        prompt,
        members,
        advantages: compute_advantages(&rewards, EPS_STD),
    })
}

/// `(r - mean) / max(std, eps_std)` with the population std; all zeros when
/// the std is below `eps_std`.
pub fn compute_advantages(rewards: &[f64], eps_std: f64) -> Vec<f64> {
    let (mean, std) = mean_std(rewards);
    if std < eps_std {
        return vec![0.0; rewards.len()];
    }
    let d = std.max(eps_std);
    rewards.iter().map(|r| (r - mean) / d).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLossOutput {
    pub loss: f64,
    /// d loss / d per-token score, per response (empty for dropped ones).
    pub token_weights: Vec<Vec<f64>>,
    pub ratios: Vec<f64>,
    pub kept: Vec<bool>,
    pub kl: f64,
}

impl PolicyLossOutput {
    pub fn dropped(&self) -> usize {
        self.kept.iter().filter(|k| !**k).count()
    }
}

/// Gradient factor of `min(rho A, clip(rho) A)` with respect to `log rho`.
fn clipped_grad(rho: f64, a: f64, eps: f64) -> f64 {
    let clipped = (a > 0.0 && rho > 1.0 + eps) || (a < 0.0 && rho < 1.0 - eps);
    if clipped {
        0.0
    } else {
        rho * a
    }
}

fn clipped_obj(rho: f64, a: f64, eps: f64) -> f64 {
    (rho * a).min(rho.clamp(1.0 - eps, 1.0 + eps) * a)
}

/// Clipped surrogate `-mean_i min(rho_i A_i, clip(rho_i) A_i)` plus the
/// optional k3 KL penalty against reference scores. Responses with a
/// non-finite ratio are dropped.
pub fn policy_loss(
    new: &[SurrogateScore],
    old: &[SurrogateScore],
    advantages: &[f64],
    cfg: &PolicyLossConfig,
    refs: Option<&[SurrogateScore]>,
) -> PolicyLossOutput {
    let n_all = new.len();
    assert!(old.len() == n_all && advantages.len() == n_all);
    let eps = cfg.clip_eps;
    let use_kl = cfg.kl_coef > 0.0 && refs.is_some();
    let seq_ratio: Vec<f64> = (0..n_all).map(|i| (new[i].value - old[i].value).exp()).collect();
    let kept: Vec<bool> = (0..n_all)
        .map(|i| {
            let r_ok = !use_kl || refs.is_some_and(|r| r[i].value.is_finite());
            seq_ratio[i].is_finite()
                && new[i].value.is_finite()
                && new[i].per_token.iter().all(|x| x.is_finite())
                && r_ok
        })
        .collect();
    let n = kept.iter().filter(|k| **k).count();
    let mut out = PolicyLossOutput {
        loss: 0.0,
        token_weights: vec![Vec::new(); n_all],
        ratios: seq_ratio.clone(),
        kept: kept.clone(),
        kl: 0.0,
    };
    if n == 0 {
        return out;
    }
    let inv_n = 1.0 / n as f64;
    let mut obj = 0.0;
    let mut kl = 0.0;
    for i in (0..n_all).filter(|&i| kept[i]) {
        let a = advantages[i];
        let len = new[i].per_token.len();
        let mut w = vec![0.0; len];
        match cfg.ratio_level {
            RatioLevel::Sequence => {
                let rho = seq_ratio[i];
                obj += clipped_obj(rho, a, eps) * inv_n;
                w.fill(-clipped_grad(rho, a, eps) * inv_n);
                if use_kl {
                    let d = refs.unwrap()[i].value - new[i].value;
                    kl += (d.exp() - d - 1.0) * inv_n;
                    for x in &mut w {
                        *x += cfg.kl_coef * (1.0 - d.exp()) * inv_n;
                    }
                }
            }
            RatioLevel::Token => {
                if len == 0 {
                    continue;
                }
                let inv_l = 1.0 / len as f64;
                for (l, wl) in w.iter_mut().enumerate() {
                    let rho = (new[i].per_token[l] - old[i].per_token[l]).exp();
                    obj += clipped_obj(rho, a, eps) * inv_n * inv_l;
                    *wl = -clipped_grad(rho, a, eps) * inv_n * inv_l;
                    if use_kl {
                        let d = refs.unwrap()[i].per_token[l] - new[i].per_token[l];
                        kl += (d.exp() - d - 1.0) * inv_n * inv_l;
                        *wl += cfg.kl_coef * (1.0 - d.exp()) * inv_n * inv_l;
                    }
                }
            }
        }
        out.token_weights[i] = w;
    }
    out.loss = -obj + cfg.kl_coef * kl;
    out.kl = kl;
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub steps: u64,
    pub group_size: usize,
    pub prompts_per_step: usize,
    pub sampler: SamplerConfig,
    pub optim: OptimConfig,
    /// Greedy held-out accuracy every this many steps (0 = never).
    pub eval_every: u64,
    /// Repetitions of the per-step estimator variance probe (0 = off).
    pub variance_reps: usize,
    pub parallel: bool,
    pub record_wallclock: bool,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            group_size: DEFAULT_GROUP_SIZE,
            prompts_per_step: 1,
            sampler: SamplerConfig::Mdlm {
                gen_len: 8,
                plan: DenoisePlan::new(8, Selection::TopConfidence, 1.0),
            },
            optim: OptimConfig::default(),
            eval_every: 0,
            variance_reps: 4,
            parallel: true,
            record_wallclock: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RlSummary {
    pub reward_mean: Vec<f64>,
    pub accuracy: Vec<(u64, f64)>,
    pub stopped_early: bool,
}

/// Mean verifier reward of greedy decoding over `instances`.
pub fn evaluate_accuracy(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    sampler: &SamplerConfig,
    instances: &[TaskInstance],
    seed: u64,
) -> Result<f64> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let greedy = sampler.greedy();
    let rewards = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let prompt = cfg.vocab.encode(&inst.prompt)?;
            let r = greedy.sample(params, cfg, &prompt, &mut RngStream::new(seed, "eval").child(i))?;
            Ok(inst.verify(&cfg.vocab, &r.response).value)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(rewards.iter().sum::<f64>() / instances.len() as f64)
}

/// Index into `pool` of global prompt `g`: epoch-wise shuffled passes.
fn pool_index(seed: u64, n: usize, g: u64) -> usize {
    let epoch = g / n as u64;
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed, "rl-order").child(epoch).shuffle(&mut order);
    order[(g % n as u64) as usize]
}

/// Output of one RL update.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub groups: Vec<RolloutGroup>,
    pub policy: PolicyLossOutput,
    pub new_scores: Vec<SurrogateScore>,
    pub record: MetricsRecord,
}

/// One full rollout-reward-score-advantage-update step.
pub fn rl_step(
    state: &mut TrainState,
    cfg: &ModelConfig,
    alg: &AlgorithmSpec,
    rc: &RlConfig,
    pool: &[TaskInstance],
) -> Result<StepReport> {
    let start = Instant::now();
    let step = state.step;
    let seed = state.seed;
    let mut groups = Vec::with_capacity(rc.prompts_per_step);
    for j in 0..rc.prompts_per_step {
        let g = step * rc.prompts_per_step as u64 + j as u64;
        let inst = &pool[pool_index(seed, pool.len(), g)];
        groups.push(run_group(
            &state.params,
            state.reference.as_ref(),
            cfg,
            alg,
            &rc.sampler,
            inst,
            g,
            rc.group_size,
            seed,
            rc.parallel,
        )?);
    }
    let members: Vec<&ScoredRollout> = groups.iter().flat_map(|g| &g.members).collect();
    let advantages: Vec<f64> = groups.iter().flat_map(|g| g.advantages.iter().copied()).collect();
    let prompts: Vec<&TokenSeq> = groups
        .iter()
        .flat_map(|g| g.members.iter().map(|_| &g.prompt))
        .collect();

    // new-policy scores, with the old plan when noise is shared
    let plans: Vec<SurrogatePlan> = if alg.likelihood.shared_noise {
        members.iter().map(|m| m.plan.clone()).collect()
    } else {
        members
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let mut r = RngStream::new(seed, "noise-new").child(step).child(i);
                plan_surrogate(
                    cfg,
                    &alg.likelihood,
                    prompts[i],
                    &m.rollout.response,
                    Some(&m.rollout.trajectory),
                    &mut r,
                )
            })
            .collect::<Result<_>>()?
    };
    let needs_grad = advantages.iter().any(|a| *a != 0.0) || alg.policy_loss.kl_coef > 0.0;
    let params = &state.params;
    let evals: Vec<PlanEval> = plans
        .par_iter()
        .map(|p| p.evaluate(params, cfg, needs_grad))
        .collect::<Result<_>>()?;
    let new_scores: Vec<SurrogateScore> = evals.iter().map(|e| e.score.clone()).collect();
    let old: Vec<SurrogateScore> = members.iter().map(|m| m.old.clone()).collect();
    let refs: Option<Vec<SurrogateScore>> = members.iter().map(|m| m.reference.clone()).collect();
    let policy = policy_loss(&new_scores, &old, &advantages, &alg.policy_loss, refs.as_deref());
    let mut grads = Gradients::zeros_for(&state.params);
    if needs_grad {
        for ((p, e), w) in plans.iter().zip(&evals).zip(&policy.token_weights) {
            if !w.is_empty() {
                p.backward(&state.params, cfg, e, w, &mut grads);
            }
        }
    }
    let rewards: Vec<f64> = members.iter().map(|m| m.reward.value).collect();
    let est_var = if rc.variance_reps >= 2 {
        let m = members[0];
        let probe = variance_probe(
            &state.params,
            cfg,
            &alg.likelihood,
            prompts[0],
            &m.rollout.response,
            Some(&m.rollout.trajectory),
            rc.variance_reps,
            &RngStream::new(seed, "probe").child(step),
        )?;
        Some(probe.var)
    } else {
        None
    };
    let out = finish_step(state, policy.loss, grads, &rc.optim)?;
    let (rm, rs) = mean_std(&rewards);
    let mut rec = MetricsRecord::new("rl", state.step);
    rec.reward_mean = Some(rm);
    rec.reward_std = Some(rs);
    rec.loss = Some(policy.loss);
    rec.est_var = est_var;
    rec.grad_norm = Some(out.grad_norm);
    rec.update_norm = Some(out.update_norm);
    rec.dropped = policy.dropped() as u64;
    rec.skipped = state.total_skips;
    if rc.record_wallclock {
        rec.wallclock_s = Some(start.elapsed().as_secs_f64());
    }
    Ok(StepReport {
        groups,
        policy,
        new_scores,
        record: rec,
    })
}

/// Runs RL steps until `rc.steps`, reporting each through `hooks`.
pub fn train_rl(
    state: &mut TrainState,
    cfg: &ModelConfig,
    alg: &AlgorithmSpec,
    rc: &RlConfig,
    pool: &[TaskInstance],
    heldout: &[TaskInstance],
    hooks: &mut dyn RunHooks,
) -> Result<RlSummary> {
    alg.validate()?;
    rc.optim.validate()?;
    if pool.is_empty() || rc.prompts_per_step == 0 {
        return Err(Error::Config(
            "RL needs a prompt pool and at least one prompt per step".into(),
        ));
    }
    if rc.group_size < 2 {
        return Err(Error::Config("group size must be at least 2".into()));
    }
    if alg.policy_loss.kl_coef > 0.0 && state.reference.is_none() {
        state.snapshot_reference();
    }
    let mut summary = RlSummary::default();
    while state.step < rc.steps {
        let mut report = rl_step(state, cfg, alg, rc, pool)?;
        summary.reward_mean.push(report.record.reward_mean.unwrap_or(0.0));
        if rc.eval_every > 0
            && (state.step.is_multiple_of(rc.eval_every) || state.step == rc.steps)
            && !heldout.is_empty()
        {
            let acc = evaluate_accuracy(&state.params, cfg, &rc.sampler, heldout, state.seed)?;
            report.record.accuracy = Some(acc);
            summary.accuracy.push((state.step, acc));
        }
        if hooks.on_step(state, &report.record)? == Flow::Stop {
            summary.stopped_early = state.step < rc.steps;
            break;
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate, TaskSpec};
    use crate::train::MemoryHooks;
    use crate::vocab::Vocab;

    fn setup() -> (ModelConfig, DenoiserParams) {
        let mut cfg = ModelConfig::tiny(Vocab::shared());
        cfg.max_len = 32;
        let p = DenoiserParams::init(&cfg, &mut RngStream::new(0, "i")).unwrap();
        (cfg, p)
    }

    fn score(v: f64) -> SurrogateScore {
        SurrogateScore {
            kind: EstimatorKind::OneStep,
            value: v,
            terms: vec![v],
            per_token: vec![v / 2.0, v / 2.0],
        }
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(compute_advantages(&[1.0; 8], EPS_STD), vec![0.0; 8]);
        let mut r = vec![0.0; 8];
        r[0] = 1.0;
        let a = compute_advantages(&r, EPS_STD);
        assert!((a[0] - 7f64.sqrt()).abs() < 1e-12);
        for x in &a[1..] {
            assert!((x + 1.0 / 7f64.sqrt()).abs() < 1e-12);
        }
        assert!(a.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn policy_loss_identities() {
        let pl = PolicyLossConfig::default();
        let s: Vec<SurrogateScore> = [-3.0, -2.0].iter().map(|&v| score(v)).collect();
        let out = policy_loss(&s, &s, &[1.0, -1.0], &pl, None);
        assert_eq!(out.loss, 0.0);
        // clipped branch gives no gradient
        let new = vec![score(-3.0 + 0.5), score(-2.0)];
        let out = policy_loss(&new, &s, &[1.0, -1.0], &pl, None);
        assert!(out.token_weights[0].iter().all(|w| *w == 0.0));
        assert!(out.token_weights[1].iter().all(|w| *w != 0.0));
        // non-finite ratio drops the response
        let new = vec![score(f64::NAN), score(-2.0)];
        let out = policy_loss(&new, &s, &[1.0, -1.0], &pl, None);
        assert_eq!(out.dropped(), 1);
        assert!(out.loss.is_finite());
    }

    #[test]
    fn kl_surrogate_is_zero_at_reference() {
        let pl = PolicyLossConfig {
            kl_coef: 0.1,
            ..Default::default()
        };
        let s: Vec<SurrogateScore> = [-3.0, -2.0].iter().map(|&v| score(v)).collect();
        let out = policy_loss(&s, &s, &[0.0, 0.0], &pl, Some(&s));
        assert_eq!(out.kl, 0.0);
        let r = vec![score(-2.5), score(-2.0)];
        let out = policy_loss(&s, &s, &[0.0, 0.0], &pl, Some(&r));
        assert!(out.kl > 0.0);
    }

    #[test]
    fn token_level_at_unit_ratio_matches_sequence_gradient_direction() {
        let s = vec![score(-2.0), score(-4.0)];
        let tok = PolicyLossConfig {
            ratio_level: RatioLevel::Token,
            ..Default::default()
        };
        let out = policy_loss(&s, &s, &[1.0, -1.0], &tok, None);
        assert_eq!(out.loss, 0.0);
        assert!(out.token_weights[0].iter().all(|w| *w < 0.0));
        assert!(out.token_weights[1].iter().all(|w| *w > 0.0));
    }

    #[test]
    fn group_is_identical_serial_and_parallel() {
        let (cfg, p) = setup();
        let inst = generate(&TaskSpec::countdown(), &mut RngStream::new(1, "t")).unwrap();
        let rc = RlConfig::default();
        let alg = AlgorithmSpec::preset("mc_elbo_grpo").unwrap();
        let a = run_group(&p, None, &cfg, &alg, &rc.sampler, &inst, 3, 4, 7, true).unwrap();
        let b = run_group(&p, None, &cfg, &alg, &rc.sampler, &inst, 3, 4, 7, false).unwrap();
        for (x, y) in a.members.iter().zip(&b.members) {
            assert_eq!(x.rollout.trajectory, y.rollout.trajectory);
            assert_eq!(x.old, y.old);
        }
        assert_eq!(a.advantages, b.advantages);
    }

    #[test]
    fn hooks_do_not_change_rollouts() {
        let (cfg, p) = setup();
        let inst = generate(&TaskSpec::countdown(), &mut RngStream::new(1, "t")).unwrap();
        let rc = RlConfig::default();
        let groups: Vec<RolloutGroup> = AlgorithmSpec::PRESETS
            .iter()
            .filter(|n| **n != "block_elbo_grpo")
            .map(|n| {
                let alg = AlgorithmSpec::preset(n).unwrap();
                run_group(&p, None, &cfg, &alg, &rc.sampler, &inst, 0, 3, 7, false).unwrap()
            })
            .collect();
        for g in &groups[1..] {
            for (x, y) in g.members.iter().zip(&groups[0].members) {
                assert_eq!(x.rollout.response, y.rollout.response);
                assert_eq!(x.reward, y.reward);
            }
        }
    }

    #[test]
    fn shared_noise_ratio_is_one() {
        let (cfg, p) = setup();
        let rc = RlConfig {
            steps: 1,
            group_size: 4,
            variance_reps: 0,
            ..RlConfig::default()
        };
        let pool = vec![generate(&TaskSpec::countdown(), &mut RngStream::new(1, "t")).unwrap()];
        for name in ["d1", "coupled_grpo", "mc_elbo_grpo", "trajectory_grpo"] {
            let alg = AlgorithmSpec::preset(name).unwrap();
            let mut st = TrainState::new(p.clone(), 3, &rc.optim);
            let rep = rl_step(&mut st, &cfg, &alg, &rc, &pool).unwrap();
            for r in &rep.policy.ratios {
                assert!((r - 1.0).abs() < 1e-10, "{name}: {r}");
            }
        }
    }

    #[test]
    fn constant_reward_leaves_params() {
        let (cfg, p) = setup();
        // an unsolvable pool: every response gets reward 0
        let mut inst = generate(&TaskSpec::countdown(), &mut RngStream::new(1, "t")).unwrap();
        if let crate::tasks::Payload::CountdownLite { target, .. } = &mut inst.payload {
            *target = 100_000;
        }
        let rc = RlConfig {
            steps: 2,
            group_size: 4,
            variance_reps: 2,
            ..RlConfig::default()
        };
        let mut st = TrainState::new(p.clone(), 3, &rc.optim);
        let mut hooks = MemoryHooks::default();
        train_rl(&mut st, &cfg, &AlgorithmSpec::default(), &rc, &[inst], &[], &mut hooks).unwrap();
        for r in &hooks.records {
            assert_eq!(r.reward_mean, Some(0.0));
            assert!(r.update_norm.unwrap() < 1e-12);
            assert_eq!(r.loss, Some(0.0));
        }
        assert!(st.params.max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn preset_validation() {
        for n in AlgorithmSpec::PRESETS {
            AlgorithmSpec::preset(n).unwrap().validate().unwrap();
        }
        let mut bad = AlgorithmSpec::preset("d1").unwrap();
        bad.trajectory_rule = TrajectoryRule::RecordedTrajectory;
        assert!(bad.validate().is_err());
        bad = AlgorithmSpec::preset("d1").unwrap();
        bad.policy_loss.kl_coef = -1.0;
        assert!(bad.validate().is_err());
        assert!(AlgorithmSpec::preset("nope").is_err());
    }
}
