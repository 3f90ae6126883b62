//! Supervised fine-tuning and ELBO-scored preference optimization.

use std::io::BufRead;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{plan_surrogate, EstimatorConfig, SurrogatePlan};
use crate::model::{AttentionMode, DenoiserParams, Gradients, ModelConfig, ScoringPass, Target};
use crate::rng::RngStream;
use crate::seq::sample_t;
use crate::train::{finish_step, mean_std, Flow, MetricsRecord, OptimConfig, RunHooks, TrainState};
use crate::vocab::{effective_len, TokenSeq, Vocab};

pub const DEFAULT_BETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub prompt: TokenSeq,
    /// Terminated by eos; anything after the eos is padding.
    pub response: TokenSeq,
}

impl SftExample {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let n = self.prompt.len() + self.response.len();
        if n > cfg.max_len {
            return Err(Error::Domain(format!(
                "example length {n} exceeds max_len {}",
                cfg.max_len
            )));
        }
        self.prompt.validate(&cfg.vocab)?;
        self.response.validate(&cfg.vocab)?;
        let m = cfg.vocab.mask_id;
        if self.prompt.0.contains(&m) || self.response.0.contains(&m) {
            return Err(Error::InvalidInput("example contains the mask token".into()));
        }
        Ok(())
    }

    /// Number of trained response positions: up to and including the eos.
    fn trained_len(&self, vocab: &Vocab) -> usize {
        (effective_len(&self.response.0, vocab.eos_id) + 1).min(self.response.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        if self.chosen == self.rejected {
            return Err(Error::InvalidInput(
                "chosen and rejected responses are identical".into(),
            ));
        }
        Ok(())
    }
}

/// Masked NELBO of the response at time `t`; the prompt is never masked and
/// positions after the eos are padding. Block-causal models sum the
/// per-block terms, each conditioned on the clean prefix.
pub fn sft_loss(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    ex: &SftExample,
    t: f64,
    rng: &mut RngStream,
) -> Result<(f64, Gradients)> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!("t = {t} outside (0, 1]")));
    }
    ex.validate(cfg)?;
    let v = &cfg.vocab;
    let p = ex.prompt.len();
    let end = ex.trained_len(v);
    let mut input = ex.prompt.0.clone();
    input.extend(
        ex.response
            .0
            .iter()
            .enumerate()
            .map(|(i, &tok)| if i < end { tok } else { v.pad_id }),
    );
    let mut targets = Vec::new();
    for l in 0..end {
        if rng.uniform() < t {
            targets.push(Target {
                pos: p + l,
                token: input[p + l],
            });
            input[p + l] = v.mask_id;
        }
    }
    assert!(
        !input[..p].contains(&v.mask_id),
        "prompt positions must never be masked"
    );
    let spans: Vec<(usize, usize)> = match cfg.attention {
        AttentionMode::Bidirectional => vec![(0, ex.response.len())],
        AttentionMode::BlockCausal { block_len } => (0..end)
            .step_by(block_len)
            .map(|s| (s, (s + block_len).min(ex.response.len())))
            .collect(),
    };
    let mut grads = Gradients::zeros_for(params);
    let mut loss = 0.0;
    for (lo, hi) in spans {
        let tg: Vec<Target> = targets
            .iter()
            .copied()
            .filter(|x| x.pos >= p + lo && x.pos < p + hi)
            .collect();
        if tg.is_empty() {
            continue;
        }
        let pass = ScoringPass {
            input: input[..p + hi].to_vec(),
            prefix_len: p,
            targets: tg,
        };
        let eval = pass.eval(params, cfg, true)?;
        loss -= eval.log_probs.iter().sum::<f64>() / t;
        pass.backward(params, cfg, &eval, &vec![-1.0 / t; pass.targets.len()], &mut grads);
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub record_wallclock: bool,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            optim: OptimConfig::default(),
            record_wallclock: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SftSummary {
    /// Mean training loss of each epoch finished in this call.
    pub epoch_loss: Vec<f64>,
    pub heldout_loss: Vec<f64>,
    pub stopped_early: bool,
}

/// Held-out loss under fixed per-example noise, so epochs are comparable.
pub fn heldout_sft_loss(params: &DenoiserParams, cfg: &ModelConfig, examples: &[SftExample], seed: u64) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let losses = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut r = RngStream::new(seed, "heldout").child(i);
            let t = sample_t(&mut r);
            sft_loss(params, cfg, ex, t, &mut r).map(|(l, _)| l)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / examples.len() as f64)
}

/// Position of data item `g` of an epoch-shuffled stream over `n` items.
fn shuffled_index(seed: u64, label: &str, n: usize, g: usize) -> usize {
    let epoch = g / n;
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed, label).child(epoch).shuffle(&mut order);
    order[g % n]
}

/// Minibatch SFT. Step `s` draws batch `s mod steps_per_epoch` of epoch
/// `s / steps_per_epoch`; one t per example. Resumable from any step.
pub fn train_sft(
    state: &mut TrainState,
    cfg: &ModelConfig,
    corpus: &[SftExample],
    heldout: &[SftExample],
    sc: &SftConfig,
    hooks: &mut dyn RunHooks,
) -> Result<SftSummary> {
    if corpus.is_empty() {
        return Err(Error::Config("SFT corpus is empty".into()));
    }
    if sc.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    sc.optim.validate()?;
    for ex in corpus.iter().chain(heldout) {
        ex.validate(cfg)?;
    }
    let n = corpus.len();
    let per_epoch = n.div_ceil(sc.batch_size) as u64;
    let total = per_epoch * sc.epochs as u64;
    let mut summary = SftSummary::default();
    let mut epoch_losses = Vec::new();
    while state.step < total {
        let start = Instant::now();
        let step = state.step;
        let epoch = step / per_epoch;
        let b = (step % per_epoch) as usize;
        let lo = b * sc.batch_size;
        let hi = (lo + sc.batch_size).min(n);
        let items: Vec<usize> = (lo..hi)
            .map(|i| shuffled_index(state.seed, "sft-order", n, epoch as usize * n + i))
            .collect();
        let seed = state.seed;
        let params = &state.params;
        let results = items
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut r = RngStream::new(seed, "sft-noise").child(step).child(j);
                let t = sample_t(&mut r);
                sft_loss(params, cfg, &corpus[i], t, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = Gradients::zeros_for(&state.params);
        let mut loss = 0.0;
        let w = 1.0 / results.len() as f64;
        for (l, g) in &results {
            loss += l * w;
            grads.add_scaled(g, w)?;
        }
        let out = finish_step(state, loss, grads, &sc.optim)?;
        epoch_losses.push(loss);
        let mut rec = MetricsRecord::new("sft", state.step);
        rec.epoch = Some(epoch);
        rec.loss = Some(loss);
        rec.grad_norm = Some(out.grad_norm);
        rec.update_norm = Some(out.update_norm);
        rec.skipped = state.total_skips;
        if b as u64 == per_epoch - 1 {
            let h = heldout_sft_loss(&state.params, cfg, heldout, state.seed)?;
            if !heldout.is_empty() {
                rec.heldout_loss = Some(h);
                summary.heldout_loss.push(h);
            }
            summary.epoch_loss.push(mean_std(&epoch_losses).0);
            epoch_losses.clear();
        }
        if sc.record_wallclock {
            rec.wallclock_s = Some(start.elapsed().as_secs_f64());
        }
        if hooks.on_step(state, &rec)? == Flow::Stop {
            summary.stopped_early = state.step < total;
            break;
        }
    }
    Ok(summary)
}

/// Output of [`dpo_vrpo_loss`].
#[derive(Debug, Clone)]
pub struct DpoOutput {
    pub loss: f64,
    pub margin: f64,
    pub grads: Gradients,
}

fn check_mc(est: &EstimatorConfig) -> Result<()> {
    if !est.kind.is_mc() {
        return Err(Error::Config(format!(
            "preference scores need a Monte Carlo ELBO estimator, got {}",
            est.kind.name()
        )));
    }
    Ok(())
}

/// Numerically stable `-ln sigmoid(x)`.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln sigmoid(beta * m)` with margin
/// `m = [s(chosen) - s_ref(chosen)] - [s(rejected) - s_ref(rejected)]`.
/// With shared noise one plan per response is scored under both parameter
/// sets; gradients flow only through the policy scores.
#[allow(clippy::too_many_arguments)]
pub fn dpo_vrpo_loss(
    params: &DenoiserParams,
    ref_params: &DenoiserParams,
    cfg: &ModelConfig,
    pair: &PreferencePair,
    beta: f64,
    est: &EstimatorConfig,
    rng: &RngStream,
    want_grads: bool,
) -> Result<DpoOutput> {
    check_mc(est)?;
    pair.validate()?;
    let plan = |resp: &TokenSeq, label: &str| -> Result<SurrogatePlan> {
        plan_surrogate(cfg, est, &pair.prompt, resp, None, &mut rng.child(label))
    };
    let pc = plan(&pair.chosen, "chosen")?;
    let pr = plan(&pair.rejected, "rejected")?;
    let (rc, rr) = if est.shared_noise {
        (pc.score(ref_params, cfg)?, pr.score(ref_params, cfg)?)
    } else {
        (
            plan(&pair.chosen, "ref-chosen")?.score(ref_params, cfg)?,
            plan(&pair.rejected, "ref-rejected")?.score(ref_params, cfg)?,
        )
    };
    let ec = pc.evaluate(params, cfg, want_grads)?;
    let er = pr.evaluate(params, cfg, want_grads)?;
    let margin = (ec.score.value - rc.value) - (er.score.value - rr.value);
    let loss = neg_log_sigmoid(beta * margin);
    let mut grads = Gradients::zeros_for(params);
    if want_grads && beta != 0.0 {
        let dm = -beta * sigmoid(-beta * margin);
        pc.backward(params, cfg, &ec, &vec![dm; pc.scored_len], &mut grads);
        pr.backward(params, cfg, &er, &vec![-dm; pr.scored_len], &mut grads);
    }
    Ok(DpoOutput { loss, margin, grads })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub beta: f64,
    pub estimator: EstimatorConfig,
    pub optim: OptimConfig,
    /// Held-out margin is logged every this many steps (0 = never).
    pub eval_every: u64,
    pub record_wallclock: bool,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 4,
            beta: DEFAULT_BETA,
            estimator: EstimatorConfig::mc_elbo(4),
            optim: OptimConfig::default(),
            eval_every: 50,
            record_wallclock: true,
        }
    }
}

/// Mean margin over `pairs` under fixed per-pair noise.
pub fn mean_margin(
    params: &DenoiserParams,
    ref_params: &DenoiserParams,
    cfg: &ModelConfig,
    pairs: &[PreferencePair],
    beta: f64,
    est: &EstimatorConfig,
    seed: u64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let m = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let r = RngStream::new(seed, "dpo-heldout").child(i);
            dpo_vrpo_loss(params, ref_params, cfg, pair, beta, est, &r, false).map(|o| o.margin)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(m.iter().sum::<f64>() / pairs.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DpoSummary {
    pub heldout_margin: Vec<f64>,
    pub stopped_early: bool,
}

/// Preference optimization against the state's frozen reference (taken
/// now if the state has none).
pub fn train_dpo(
    state: &mut TrainState,
    cfg: &ModelConfig,
    pairs: &[PreferencePair],
    heldout: &[PreferencePair],
    dc: &DpoConfig,
    hooks: &mut dyn RunHooks,
) -> Result<DpoSummary> {
    if pairs.is_empty() || dc.batch_size == 0 {
        return Err(Error::Config("DPO needs pairs and a positive batch size".into()));
    }
    check_mc(&dc.estimator)?;
    dc.estimator.validate()?;
    dc.optim.validate()?;
    if state.reference.is_none() {
        state.snapshot_reference();
    }
    let mut summary = DpoSummary::default();
    let n = pairs.len();
    while state.step < dc.steps {
        let start = Instant::now();
        let step = state.step;
        let seed = state.seed;
        let items: Vec<usize> = (0..dc.batch_size)
            .map(|j| shuffled_index(seed, "dpo-order", n, step as usize * dc.batch_size + j))
            .collect();
        let reference = state.reference.as_ref().expect("reference set above");
        let params = &state.params;
        let outs = items
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let r = RngStream::new(seed, "dpo-noise").child(step).child(j);
                dpo_vrpo_loss(params, reference, cfg, &pairs[i], dc.beta, &dc.estimator, &r, true)
            })
            .collect::<Result<Vec<_>>>()?;
        let w = 1.0 / outs.len() as f64;
        let mut grads = Gradients::zeros_for(&state.params);
        let (mut loss, mut margin) = (0.0, 0.0);
        for o in &outs {
            loss += o.loss * w;
            margin += o.margin * w;
            grads.add_scaled(&o.grads, w)?;
        }
        let out = finish_step(state, loss, grads, &dc.optim)?;
        let mut rec = MetricsRecord::new("dpo", state.step);
        rec.loss = Some(loss);
        rec.margin = Some(margin);
        rec.grad_norm = Some(out.grad_norm);
        rec.update_norm = Some(out.update_norm);
        rec.skipped = state.total_skips;
        if dc.eval_every > 0
            && (state.step.is_multiple_of(dc.eval_every) || state.step == dc.steps)
            && !heldout.is_empty()
        {
            let reference = state.reference.as_ref().expect("reference set above");
            let m = mean_margin(
                &state.params,
                reference,
                cfg,
                heldout,
                dc.beta,
                &dc.estimator,
                state.seed,
            )?;
            rec.heldout_margin = Some(m);
            summary.heldout_margin.push(m);
        }
        if dc.record_wallclock {
            rec.wallclock_s = Some(start.elapsed().as_secs_f64());
        }
        if hooks.on_step(state, &rec)? == Flow::Stop {
            summary.stopped_early = state.step < dc.steps;
            break;
        }
    }
    Ok(summary)
}

/// Reads `(prompt, response)` records, one JSON object per line.
pub fn read_sft_corpus<R: BufRead>(r: R, vocab: &Vocab) -> Result<Vec<SftExample>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Rec {
        prompt: String,
        response: String,
    }
    read_lines(r, |rec: Rec| {
        let mut response = vocab.encode(&rec.response)?;
        if !response.0.contains(&vocab.eos_id) {
            response.0.push(vocab.eos_id);
        }
        Ok(SftExample {
            prompt: vocab.encode(&rec.prompt)?,
            response,
        })
    })
}

/// Reads `(prompt, chosen, rejected)` records, one JSON object per line.
pub fn read_preference_corpus<R: BufRead>(r: R, vocab: &Vocab) -> Result<Vec<PreferencePair>> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Rec {
        prompt: String,
        chosen: String,
        rejected: String,
    }
    read_lines(r, |rec: Rec| {
        let pair = PreferencePair {
            prompt: vocab.encode(&rec.prompt)?,
            chosen: vocab.encode(&rec.chosen)?,
            rejected: vocab.encode(&rec.rejected)?,
        };
        pair.validate()?;
        Ok(pair)
    })
}

fn read_lines<R: BufRead, T: serde::de::DeserializeOwned, U>(
    r: R,
    mut f: impl FnMut(T) -> Result<U>,
) -> Result<Vec<U>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| Error::Format(format!("corpus line {}: {e}", n + 1)))?;
        out.push(f(rec)?);
    }
    Ok(out)
}
