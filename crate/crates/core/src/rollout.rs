//! Reverse-process samplers with full trajectory recording.
//!
//! Both samplers share one denoising loop: at every step the model scores
//! the still-masked positions of the active span, `k_s` of them are chosen,
//! tokens are drawn for the chosen positions in ascending order and written
//! in. The per-token log-probability recorded in the trajectory is always
//! the temperature-1 model probability, whatever the sampling temperature.

use std::io::{BufRead, Write};
use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, AttentionMode, DenoiserParams, ModelConfig};
use crate::rng::RngStream;
use crate::seq::MaskedState;
use crate::vocab::{effective_len, TokenId, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Uniformly random positions, without replacement.
    Random,
    /// Positions with the largest max-probability; ties go to the lowest index.
    TopConfidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoisePlan {
    pub steps: usize,
    /// Explicit per-step unmask counts; uniform when absent.
    pub counts: Option<Vec<usize>>,
    pub selection: Selection,
    /// 0 means greedy.
    pub temperature: f64,
}

impl DenoisePlan {
    pub fn new(steps: usize, selection: Selection, temperature: f64) -> Self {
        Self {
            steps,
            counts: None,
            selection,
            temperature,
        }
    }

    pub fn greedy(steps: usize) -> Self {
        Self::new(steps, Selection::TopConfidence, 0.0)
    }

    /// Per-step counts for `n` masked positions. Uniform plans spread the
    /// remainder over the earliest steps.
    pub fn schedule(&self, n: usize) -> Result<Vec<usize>> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        if let Some(c) = &self.counts {
            if c.len() != self.steps || c.iter().sum::<usize>() != n {
                return Err(Error::Config(format!(
                    "unmask counts {c:?} do not cover {n} positions in {} steps",
                    self.steps
                )));
            }
            return Ok(c.clone());
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        if self.steps == 0 || self.steps > n {
            return Err(Error::Config(format!(
                "{} steps cannot unmask {n} positions",
                self.steps
            )));
        }
        let base = n / self.steps;
        let extra = n % self.steps;
        Ok((0..self.steps).map(|s| base + usize::from(s < extra)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub state_before: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub tokens: Vec<TokenId>,
    pub log_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_len: usize,
    pub mask_id: TokenId,
    pub eos_id: TokenId,
    pub pad_id: TokenId,
    pub steps: Vec<TrajectoryStep>,
    /// Absolute position from which tokens were overwritten with pad after
    /// the last block (block sampler eos handling).
    pub pad_from: Option<usize>,
}

impl Trajectory {
    fn new(prompt_len: usize, cfg: &ModelConfig) -> Self {
        Self {
            prompt_len,
            mask_id: cfg.vocab.mask_id,
            eos_id: cfg.vocab.eos_id,
            pad_id: cfg.vocab.pad_id,
            steps: Vec::new(),
            pad_from: None,
        }
    }

    /// Number of response positions covered by the trajectory.
    pub fn response_len(&self) -> usize {
        self.steps.iter().map(|s| s.positions.len()).sum()
    }

    /// Absolute end of the scored region: positions at or after the first
    /// eos of the final response carry no likelihood.
    pub fn scored_end(&self) -> usize {
        let mut response = vec![self.pad_id; self.response_len()];
        for s in &self.steps {
            for (&p, &t) in s.positions.iter().zip(&s.tokens) {
                if let Some(slot) = p.checked_sub(self.prompt_len).and_then(|i| response.get_mut(i)) {
                    *slot = t;
                }
            }
        }
        self.prompt_len + effective_len(&response, self.eos_id)
    }

    /// Sum of the recorded behaviour log-probs over scored positions.
    pub fn recorded_log_prob(&self) -> f64 {
        let end = self.scored_end();
        self.steps
            .iter()
            .flat_map(|s| s.positions.iter().zip(&s.log_probs))
            .filter(|(&p, _)| p < end)
            .map(|(_, lp)| lp)
            .sum()
    }

    /// One header record followed by one record per step.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            record: &'a str,
            version: u32,
            prompt_len: usize,
            mask_id: TokenId,
            eos_id: TokenId,
            pad_id: TokenId,
            pad_from: Option<usize>,
            steps: usize,
        }
        let h = Header {
            record: "header",
            version: 1,
            prompt_len: self.prompt_len,
            mask_id: self.mask_id,
            eos_id: self.eos_id,
            pad_id: self.pad_id,
            pad_from: self.pad_from,
            steps: self.steps.len(),
        };
        writeln!(w, "{}", serde_json::to_string(&h).map_err(json_err)?)?;
        for (i, s) in self.steps.iter().enumerate() {
            let line = serde_json::json!({
                "record": "step",
                "index": i,
                "state_before": s.state_before,
                "positions": s.positions,
                "tokens": s.tokens,
                "log_probs": s.log_probs,
            });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            record: String,
            version: u32,
            prompt_len: usize,
            mask_id: TokenId,
            eos_id: TokenId,
            pad_id: TokenId,
            pad_from: Option<usize>,
            steps: usize,
        }
        #[derive(Deserialize)]
        struct Step {
            record: String,
            index: usize,
            #[serde(flatten)]
            step: TrajectoryStep,
        }
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty trajectory file".into()))??;
        let h: Header = serde_json::from_str(&first).map_err(json_err)?;
        if h.record != "header" || h.version != 1 {
            return Err(Error::Format("bad trajectory header".into()));
        }
        let mut steps = Vec::with_capacity(h.steps);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Step = serde_json::from_str(&line).map_err(json_err)?;
            if s.record != "step" || s.index != steps.len() {
                return Err(Error::Format(format!("unexpected step record {}", s.index)));
            }
            steps.push(s.step);
        }
        if steps.len() != h.steps {
            return Err(Error::Format(format!(
                "header announces {} steps, found {}",
                h.steps,
                steps.len()
            )));
        }
        Ok(Self {
            prompt_len: h.prompt_len,
            mask_id: h.mask_id,
            eos_id: h.eos_id,
            pad_id: h.pad_id,
            steps,
            pad_from: h.pad_from,
        })
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub prompt: TokenSeq,
    pub response: TokenSeq,
    pub trajectory: Trajectory,
    pub elapsed_us: u64,
}

impl RolloutResult {
    /// The initial state the trajectory starts from: prompt followed by one
    /// mask per generated position.
    pub fn initial_state(&self) -> MaskedState {
        let mut ids = self.prompt.0.clone();
        ids.extend(std::iter::repeat_n(self.trajectory.mask_id, self.response.len()));
        MaskedState::new(ids, self.trajectory.mask_id)
    }
}

/// Which reverse process generates responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplerConfig {
    Mdlm {
        gen_len: usize,
        plan: DenoisePlan,
    },
    Bdlm {
        block_len: usize,
        max_blocks: usize,
        plan: DenoisePlan,
    },
}

impl SamplerConfig {
    pub fn sample(
        &self,
        params: &DenoiserParams,
        cfg: &ModelConfig,
        prompt: &TokenSeq,
        rng: &mut RngStream,
    ) -> Result<RolloutResult> {
        match self {
            Self::Mdlm { gen_len, plan } => sample_mdlm(params, cfg, prompt, *gen_len, plan, rng),
            Self::Bdlm {
                block_len,
                max_blocks,
                plan,
            } => sample_bdlm(params, cfg, prompt, *block_len, *max_blocks, plan, rng),
        }
    }

    /// The same sampler with greedy top-confidence decoding.
    pub fn greedy(&self) -> Self {
        let mut s = self.clone();
        let plan = match &mut s {
            Self::Mdlm { plan, .. } | Self::Bdlm { plan, .. } => plan,
        };
        plan.selection = Selection::TopConfidence;
        plan.temperature = 0.0;
        s
    }

    pub fn max_response_len(&self) -> usize {
        match self {
            Self::Mdlm { gen_len, .. } => *gen_len,
            Self::Bdlm {
                block_len, max_blocks, ..
            } => block_len * max_blocks,
        }
    }
}

/// Fixed-length iterative denoising under bidirectional attention.
pub fn sample_mdlm(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    prompt: &TokenSeq,
    gen_len: usize,
    plan: &DenoisePlan,
    rng: &mut RngStream,
) -> Result<RolloutResult> {
    if cfg.attention != AttentionMode::Bidirectional {
        return Err(Error::Config(
            "masked-diffusion sampling needs a bidirectional model".into(),
        ));
    }
    let total = prompt.len() + gen_len;
    if total > cfg.max_len {
        return Err(Error::Domain(format!(
            "prompt + generation length {total} exceeds max_len {}",
            cfg.max_len
        )));
    }
    let counts = plan.schedule(gen_len)?;
    let start = Instant::now();
    let mut state = prompt.0.clone();
    state.extend(std::iter::repeat_n(cfg.vocab.mask_id, gen_len));
    let mut traj = Trajectory::new(prompt.len(), cfg);
    denoise_span(
        params,
        cfg,
        &mut state,
        prompt.len(),
        prompt.len()..total,
        &counts,
        plan,
        rng,
        &mut traj,
    )?;
    Ok(RolloutResult {
        prompt: prompt.clone(),
        response: TokenSeq(state[prompt.len()..].to_vec()),
        trajectory: traj,
        elapsed_us: start.elapsed().as_micros() as u64,
    })
}

/// Semi-autoregressive block decoding: blocks of `block_len` are appended
/// fully masked and denoised left to right. Generation stops after the
/// first block containing eos (later tokens in that block become pad) or
/// after `max_blocks`.
pub fn sample_bdlm(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    prompt: &TokenSeq,
    block_len: usize,
    max_blocks: usize,
    per_block: &DenoisePlan,
    rng: &mut RngStream,
) -> Result<RolloutResult> {
    match cfg.attention {
        AttentionMode::BlockCausal { block_len: b } if b == block_len => {}
        other => {
            return Err(Error::Config(format!(
                "block sampling with block_len {block_len} needs matching block_causal attention, model has {other:?}"
            )))
        }
    }
    let counts = per_block.schedule(block_len)?;
    let start = Instant::now();
    let v = &cfg.vocab;
    let mut state = prompt.0.clone();
    let mut traj = Trajectory::new(prompt.len(), cfg);
    for _ in 0..max_blocks {
        let lo = state.len();
        let hi = lo + block_len;
        if hi > cfg.max_len {
            break;
        }
        state.extend(std::iter::repeat_n(v.mask_id, block_len));
        denoise_span(
            params,
            cfg,
            &mut state,
            prompt.len(),
            lo..hi,
            &counts,
            per_block,
            rng,
            &mut traj,
        )?;
        if let Some(e) = state[lo..hi].iter().position(|&t| t == v.eos_id) {
            let from = lo + e + 1;
            if from < hi {
                state[from..hi].fill(v.pad_id);
                traj.pad_from = Some(from);
            }
            break;
        }
    }
    Ok(RolloutResult {
        prompt: prompt.clone(),
        response: TokenSeq(state[prompt.len()..].to_vec()),
        trajectory: traj,
        elapsed_us: start.elapsed().as_micros() as u64,
    })
}

#[allow(clippy::too_many_arguments)]
fn denoise_span(
    params: &DenoiserParams,
    cfg: &ModelConfig,
    state: &mut [TokenId],
    prompt_len: usize,
    span: Range<usize>,
    counts: &[usize],
    plan: &DenoisePlan,
    rng: &mut RngStream,
    traj: &mut Trajectory,
) -> Result<()> {
    let mask = cfg.vocab.mask_id;
    for &k in counts {
        let masked: Vec<usize> = span.clone().filter(|&i| state[i] == mask).collect();
        if k > masked.len() {
            return Err(Error::Config(format!(
                "step wants {k} positions, only {} masked",
                masked.len()
            )));
        }
        if k == 0 {
            continue;
        }
        let logits = forward(params, cfg, state, prompt_len)?;
        let log_probs: Vec<Vec<f64>> = masked.iter().map(|&i| logits.log_probs(i)).collect();
        let chosen: Vec<usize> = match plan.selection {
            Selection::Random => {
                let mut idx: Vec<usize> = (0..masked.len()).collect();
                for j in 0..k {
                    let r = j + rng.below(masked.len() - j);
                    idx.swap(j, r);
                }
                let mut c: Vec<usize> = idx[..k].to_vec();
                c.sort_unstable();
                c
            }
            Selection::TopConfidence => {
                let conf: Vec<f64> = log_probs.iter().map(|lp| max_allowed(lp, mask).1).collect();
                let mut idx: Vec<usize> = (0..masked.len()).collect();
                // stable sort keeps lower positions first among equal scores
                idx.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]));
                let mut c: Vec<usize> = idx[..k].to_vec();
                c.sort_unstable();
                c
            }
        };
        let before = state.to_vec();
        let mut positions = Vec::with_capacity(k);
        let mut tokens = Vec::with_capacity(k);
        let mut lps = Vec::with_capacity(k);
        for &c in &chosen {
            let lp = &log_probs[c];
            let tok = if plan.temperature == 0.0 {
                max_allowed(lp, mask).0
            } else {
                sample_token(lp, plan.temperature, mask, rng)
            };
            positions.push(masked[c]);
            tokens.push(tok);
            lps.push(lp[tok as usize]);
        }
        for (&p, &t) in positions.iter().zip(&tokens) {
            state[p] = t;
        }
        traj.steps.push(TrajectoryStep {
            state_before: before,
            positions,
            tokens,
            log_probs: lps,
        });
    }
    Ok(())
}

/// Argmax over every token except the mask (lowest id wins ties).
fn max_allowed(lp: &[f64], mask: TokenId) -> (TokenId, f64) {
    let mut best = (TokenId::MAX, f64::NEG_INFINITY);
    for (i, &v) in lp.iter().enumerate() {
        if i as TokenId != mask && (v > best.1 || best.0 == TokenId::MAX) {
            best = (i as TokenId, v);
        }
    }
    (best.0, best.1.exp())
}

fn sample_token(lp: &[f64], temperature: f64, mask: TokenId, rng: &mut RngStream) -> TokenId {
    let scaled: Vec<f64> = lp
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if i as TokenId == mask {
                f64::NEG_INFINITY
            } else {
                v / temperature
            }
        })
        .collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = rng.uniform() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        last = i;
        acc += w;
        if u < acc {
            return i as TokenId;
        }
    }
    last as TokenId
}

/// Re-applies each step's writes to `initial` and returns the final
/// sequence. Overlapping or incomplete coverage, writes into the prompt and
/// steps whose recorded state disagrees with the replay are integrity errors.
pub fn replay(traj: &Trajectory, initial: &MaskedState) -> Result<TokenSeq> {
    let mut state = initial.ids.clone();
    if traj.steps.is_empty() {
        return Ok(TokenSeq(state));
    }
    let mask = initial.mask_id;
    for (n, step) in traj.steps.iter().enumerate() {
        if step.positions.len() != step.tokens.len() || step.tokens.len() != step.log_probs.len() {
            return Err(Error::Integrity(format!("step {n} has ragged records")));
        }
        let sb = &step.state_before;
        if sb.len() > state.len() || sb[..] != state[..sb.len()] {
            return Err(Error::Integrity(format!(
                "step {n} state does not match the replayed sequence"
            )));
        }
        for (&p, &t) in step.positions.iter().zip(&step.tokens) {
            if p < traj.prompt_len || p >= state.len() {
                return Err(Error::Integrity(format!("step {n} writes outside the response: {p}")));
            }
            if state[p] != mask {
                return Err(Error::Integrity(format!("position {p} unmasked twice (step {n})")));
            }
            if t == mask {
                return Err(Error::Integrity(format!("step {n} writes the mask token")));
            }
            state[p] = t;
        }
    }
    if let Some(p) = state.iter().position(|&t| t == mask) {
        return Err(Error::Integrity(format!("position {p} never unmasked")));
    }
    if let Some(from) = traj.pad_from {
        if from > state.len() {
            return Err(Error::Integrity("pad start beyond sequence".into()));
        }
        let block_end = state.len();
        state[from..block_end].fill(traj.pad_id);
    }
    Ok(TokenSeq(state))
}
