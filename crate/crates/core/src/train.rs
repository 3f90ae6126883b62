//! State, metrics and step bookkeeping shared by every trainer.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    apply_update, AdamHyper, Checkpoint, DenoiserParams, Gradients, ModelConfig, OptimizerState, RecordData,
};

pub const METRICS_VERSION: u32 = 1;
pub const MAX_CONSECUTIVE_SKIPS: u32 = 3;

/// One line of the metrics log. Every field is always written; fields that
/// do not apply to a phase are null.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub version: u32,
    pub phase: String,
    pub step: u64,
    pub epoch: Option<u64>,
    pub loss: Option<f64>,
    pub reward_mean: Option<f64>,
    pub reward_std: Option<f64>,
    pub est_var: Option<f64>,
    pub grad_norm: Option<f64>,
    pub update_norm: Option<f64>,
    pub margin: Option<f64>,
    pub heldout_loss: Option<f64>,
    pub heldout_margin: Option<f64>,
    pub accuracy: Option<f64>,
    pub dropped: u64,
    pub skipped: u64,
    pub wallclock_s: Option<f64>,
}

impl MetricsRecord {
    pub fn new(phase: &str, step: u64) -> Self {
        Self {
            version: METRICS_VERSION,
            phase: phase.to_string(),
            step,
            ..Self::default()
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics records always serialize")
    }
}

/// What a trainer should do after reporting a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Called after every completed step, in order.
pub trait RunHooks {
    fn on_step(&mut self, state: &TrainState, record: &MetricsRecord) -> Result<Flow>;
}

/// Keeps records in memory.
#[derive(Debug, Default)]
pub struct MemoryHooks {
    pub records: Vec<MetricsRecord>,
    pub stop_after: Option<u64>,
}

impl RunHooks for MemoryHooks {
    fn on_step(&mut self, state: &TrainState, record: &MetricsRecord) -> Result<Flow> {
        self.records.push(record.clone());
        Ok(match self.stop_after {
            Some(s) if state.step >= s => Flow::Stop,
            _ => Flow::Continue,
        })
    }
}

/// Append-only line-delimited metrics file, flushed after every record.
pub struct JsonlSink {
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", rec.to_json_line())?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("metrics line {}: {e}", n + 1))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let h = AdamHyper::default();
        Self {
            lr: 1e-3,
            clip_norm: 1.0,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
        }
    }
}

impl OptimConfig {
    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "lr {} and clip_norm {} must be positive",
                self.lr, self.clip_norm
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: DenoiserParams,
    pub opt: OptimizerState,
    pub seed: u64,
    pub consecutive_skips: u32,
    pub total_skips: u64,
    /// Frozen snapshot used by KL terms and preference losses.
    pub reference: Option<DenoiserParams>,
}

impl TrainState {
    pub fn new(params: DenoiserParams, seed: u64, optim: &OptimConfig) -> Self {
        let opt = OptimizerState::new(params.len(), optim.hyper());
        Self {
            step: 0,
            params,
            opt,
            seed,
            consecutive_skips: 0,
            total_skips: 0,
            reference: None,
        }
    }

    /// Freezes the current parameters as the reference policy.
    pub fn snapshot_reference(&mut self) {
        self.reference = Some(self.params.clone());
    }

    pub fn to_checkpoint(&self, digest: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(digest);
        ck.put_params(&self.params);
        ck.put_optimizer(&self.opt);
        ck.push(
            "state.counters",
            vec![4],
            RecordData::U64(vec![
                self.step,
                self.seed,
                u64::from(self.consecutive_skips),
                self.total_skips,
            ]),
        );
        if let Some(r) = &self.reference {
            ck.put_params_prefixed("ref.", r);
        }
        ck
    }

    /// Restores a state written by [`Self::to_checkpoint`]; the checkpoint
    /// digest must equal `digest`.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &ModelConfig, digest: &str) -> Result<Self> {
        if ck.digest != digest {
            return Err(Error::Integrity(format!(
                "checkpoint digest {} does not match {digest}",
                ck.digest
            )));
        }
        let Some(RecordData::U64(c)) = ck.get("state.counters").map(|r| &r.data) else {
            return Err(Error::Format("checkpoint has no training counters".into()));
        };
        let [step, seed, cons, total] = c[..] else {
            return Err(Error::Format("bad training counters".into()));
        };
        let reference = if ck.get(&format!("ref.{}", "tok_emb")).is_some() {
            Some(ck.params_prefixed("ref.", cfg)?)
        } else {
            None
        };
        let params = ck.params(cfg)?;
        let opt = ck.optimizer()?;
        if opt.m.len() != params.len() {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        Ok(Self {
            step,
            params,
            opt,
            seed,
            consecutive_skips: cons as u32,
            total_skips: total,
            reference,
        })
    }
}

/// Outcome of [`finish_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub grad_norm: f64,
    pub update_norm: f64,
    pub skipped: bool,
}

/// Clips and applies `grads`, or skips the step when the loss or gradient is
/// non-finite. The step counter always advances. Too many consecutive skips
/// abort the run.
pub fn finish_step(
    state: &mut TrainState,
    loss: f64,
    mut grads: Gradients,
    optim: &OptimConfig,
) -> Result<StepOutcome> {
    state.step += 1;
    if !loss.is_finite() || !grads.is_finite() {
        state.consecutive_skips += 1;
        state.total_skips += 1;
        if state.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
            return Err(Error::NonFinite(format!(
                "{} consecutive non-finite steps, last at step {} (loss {loss})",
                state.consecutive_skips, state.step
            )));
        }
        return Ok(StepOutcome {
            grad_norm: f64::NAN,
            update_norm: 0.0,
            skipped: true,
        });
    }
    state.consecutive_skips = 0;
    let grad_norm = grads.clip_norm(optim.clip_norm);
    let update_norm = apply_update(&mut state.params, &grads, &mut state.opt, optim.lr)?;
    Ok(StepOutcome {
        grad_norm,
        update_norm,
        skipped: false,
    })
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::vocab::Vocab;

    fn state() -> (ModelConfig, TrainState) {
        let cfg = ModelConfig::tiny(Vocab::from_content("abc").unwrap());
        let p = DenoiserParams::init(&cfg, &mut RngStream::new(0, "i")).unwrap();
        (cfg, TrainState::new(p, 9, &OptimConfig::default()))
    }

    #[test]
    fn checkpoint_round_trip_with_reference() {
        let (cfg, mut s) = state();
        s.step = 7;
        s.total_skips = 2;
        s.snapshot_reference();
        s.params.data[0] += 1.0;
        let ck = s.to_checkpoint("abc");
        let back = TrainState::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), &cfg, "abc").unwrap();
        assert_eq!(back, s);
        assert!(matches!(
            TrainState::from_checkpoint(&ck, &cfg, "other"),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn three_non_finite_steps_abort() {
        let (_, mut s) = state();
        let before = s.params.clone();
        let bad = Gradients::zeros_for(&s.params);
        let o = OptimConfig::default();
        assert!(finish_step(&mut s, f64::NAN, bad.clone(), &o).unwrap().skipped);
        assert!(finish_step(&mut s, f64::INFINITY, bad.clone(), &o).unwrap().skipped);
        assert_eq!(s.params, before);
        assert!(!finish_step(&mut s, 0.0, bad.clone(), &o).unwrap().skipped);
        assert_eq!(s.consecutive_skips, 0);
        for _ in 0..2 {
            finish_step(&mut s, f64::NAN, bad.clone(), &o).unwrap();
        }
        assert!(matches!(
            finish_step(&mut s, f64::NAN, bad, &o),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(s.total_skips, 5);
    }

    #[test]
    fn metrics_lines_have_fixed_fields() {
        let r = MetricsRecord::new("rl", 3);
        let line = r.to_json_line();
        for f in ["version", "phase", "reward_mean", "wallclock_s", "skipped"] {
            assert!(line.contains(&format!("\"{f}\"")), "{line}");
        }
        assert_eq!(read_metrics(&line).unwrap(), vec![r]);
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(m, 0.125);
        assert!((s * s - 0.109375).abs() < 1e-15);
    }
}
