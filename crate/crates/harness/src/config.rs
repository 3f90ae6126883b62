//! The versioned run configuration.
//!
//! A config is assembled in three layers of TOML values: the built-in
//! defaults of the selected preset, the user's document, then `--set`
//! overrides. The merged value is deserialized strictly, so unknown keys
//! anywhere are errors.

use std::path::{Path, PathBuf};

use dlpt_core::executor::{AlgorithmSpec, PolicyLossConfig, RatioLevel, RlConfig};
use dlpt_core::likelihood::{EstimatorConfig, EstimatorKind, TimeSampling, DEFAULT_MC_SAMPLES};
use dlpt_core::model::{AttentionMode, ModelConfig, Precision};
use dlpt_core::rollout::{DenoisePlan, SamplerConfig, Selection};
use dlpt_core::tasks::{TaskKind, TaskSpec};
use dlpt_core::train::OptimConfig;
use dlpt_core::vocab::Vocab;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const CONFIG_VERSION: u32 = 1;
pub const OUTPUT_ROOT_ENV: &str = "DLPT_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const PRESETS: [&str; 2] = ["planning", "math"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Named bundle of defaults applied under the document.
    pub preset: Option<String>,
    pub name: String,
    pub seed: u64,
    /// Excluded from the digest.
    pub output_dir: Option<PathBuf>,
    /// Parameters to start from instead of a fresh initialization.
    pub init_checkpoint: Option<PathBuf>,
    pub model: ModelSection,
    pub task: TaskSection,
    pub data: DataSection,
    pub algorithm: AlgorithmSection,
    pub estimator: EstimatorSection,
    pub plan: PlanSection,
    pub rl: RlSection,
    pub sft: SftSection,
    pub dpo: DpoSection,
    pub optim: OptimConfig,
    pub schedule: ScheduleSection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            preset: None,
            name: "run".into(),
            seed: 0,
            output_dir: None,
            init_checkpoint: None,
            model: ModelSection::default(),
            task: TaskSection::default(),
            data: DataSection::default(),
            algorithm: AlgorithmSection::default(),
            estimator: EstimatorSection::default(),
            plan: PlanSection::default(),
            rl: RlSection::default(),
            sft: SftSection::default(),
            dpo: DpoSection::default(),
            optim: OptimConfig::default(),
            schedule: ScheduleSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[default]
    Bidirectional,
    /// Blocks of `plan.block_len`.
    BlockCausal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    pub attention: AttentionKind,
    pub precision: Precision,
    pub tie_output: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(Vocab::shared());
        Self {
            d_model: d.d_model,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            max_len: d.max_len,
            ffn_mult: d.ffn_mult,
            attention: AttentionKind::Bidirectional,
            precision: d.precision,
            tie_output: d.tie_output,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    /// Copy and sort.
    pub len: Option<usize>,
    /// Countdown.
    pub operands: Option<usize>,
    pub lo: Option<u32>,
    pub hi: Option<u32>,
    /// Sudoku.
    pub holes: Option<usize>,
    pub fractional: Option<bool>,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            len: None,
            operands: None,
            lo: None,
            hi: None,
            holes: None,
            fractional: None,
        }
    }
}

impl TaskSection {
    pub fn spec(&self) -> Result<TaskSpec> {
        let foreign = |fields: &[(&str, bool)]| -> Result<()> {
            match fields.iter().find(|(_, set)| *set) {
                Some((name, _)) => Err(HarnessError::Config(format!(
                    "task field {name} does not apply to {:?} tasks",
                    self.kind
                ))),
                None => Ok(()),
            }
        };
        let countdown = [
            ("operands", self.operands.is_some()),
            ("lo", self.lo.is_some()),
            ("hi", self.hi.is_some()),
        ];
        let sudoku = [
            ("holes", self.holes.is_some()),
            ("fractional", self.fractional.is_some()),
        ];
        let len = [("len", self.len.is_some())];
        let spec = match self.kind {
            TaskKind::Copy | TaskKind::Sort => {
                foreign(&countdown)?;
                foreign(&sudoku)?;
                let len = self.len.unwrap_or(8);
                if self.kind == TaskKind::Copy {
                    TaskSpec::Copy { len }
                } else {
                    TaskSpec::Sort { len }
                }
            }
            TaskKind::CountdownLite => {
                foreign(&len)?;
                foreign(&sudoku)?;
                TaskSpec::CountdownLite {
                    operands: self.operands.unwrap_or(3),
                    lo: self.lo.unwrap_or(1),
                    hi: self.hi.unwrap_or(9),
                }
            }
            TaskKind::Sudoku4 => {
                foreign(&len)?;
                foreign(&countdown)?;
                TaskSpec::Sudoku4 {
                    holes: self.holes.unwrap_or(6),
                    fractional: self.fractional.unwrap_or(false),
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_size: usize,
    pub heldout_size: usize,
    /// Prompts the RL loop cycles through.
    pub pool_size: usize,
    /// JSONL `(prompt, response)` corpus replacing generated SFT data.
    pub sft_corpus: Option<PathBuf>,
    /// JSONL `(prompt, chosen, rejected)` corpus replacing generated pairs.
    pub preference_corpus: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_size: 2000,
            heldout_size: 64,
            pool_size: 64,
            sft_corpus: None,
            preference_corpus: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmSection {
    pub preset: String,
    pub ratio_level: RatioLevel,
}

impl Default for AlgorithmSection {
    fn default() -> Self {
        Self {
            preset: "mc_elbo_grpo".into(),
            ratio_level: RatioLevel::Sequence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    /// Overrides the algorithm preset's likelihood hook.
    pub kind: Option<EstimatorKind>,
    pub k: usize,
    /// Fixed time for one_step; uniform when absent.
    pub fixed_t: Option<f64>,
    pub weighted_pair: bool,
    pub shared_noise: bool,
    /// `estimate` subcommand: include the exact oracle column.
    pub oracle: bool,
    /// `estimate` subcommand: repetitions per estimator.
    pub reps: usize,
    /// `estimate` subcommand: Monte Carlo sample counts to compare.
    pub compare_k: Vec<usize>,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            kind: None,
            k: DEFAULT_MC_SAMPLES,
            fixed_t: None,
            weighted_pair: false,
            shared_noise: true,
            oracle: true,
            reps: 200,
            compare_k: vec![1, 4, 16],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Mdlm,
    Bdlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub sampler: SamplerKind,
    /// Response length for the masked sampler.
    pub gen_len: usize,
    /// Denoising steps per response (mdlm) or per block (bdlm).
    pub steps: usize,
    pub block_len: usize,
    pub max_blocks: usize,
    pub selection: Selection,
    pub temperature: f64,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Mdlm,
            gen_len: 16,
            steps: 16,
            block_len: 32,
            max_blocks: 1,
            selection: Selection::TopConfidence,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSection {
    pub group_size: usize,
    pub prompts_per_step: usize,
    pub clip: f64,
    pub kl_coef: f64,
    pub variance_reps: usize,
    pub parallel: bool,
}

impl Default for RlSection {
    fn default() -> Self {
        let d = RlConfig::default();
        let pl = PolicyLossConfig::default();
        Self {
            group_size: d.group_size,
            prompts_per_step: d.prompts_per_step,
            clip: pl.clip_eps,
            kl_coef: pl.kl_coef,
            variance_reps: d.variance_reps,
            parallel: d.parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftSection {
    pub batch_size: usize,
}

impl Default for SftSection {
    fn default() -> Self {
        Self { batch_size: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoSection {
    pub beta: f64,
    pub batch_size: usize,
    /// Monte Carlo samples of the preference score.
    pub k: usize,
}

impl Default for DpoSection {
    fn default() -> Self {
        Self {
            beta: dlpt_core::alignment::DEFAULT_BETA,
            batch_size: 4,
            k: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    /// SFT length.
    pub epochs: usize,
    /// RL and DPO length.
    pub steps: u64,
    /// Held-out evaluation cadence in steps (0 = only at the end).
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            steps: 200,
            eval_every: 0,
            checkpoint_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Record per-step wallclock (informational, non-deterministic).
    pub wallclock: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { wallclock: true }
    }
}

/// Default-value layer of a named preset.
pub fn preset_layer(name: &str) -> Result<toml::Table> {
    let text = match name {
        "planning" => "[plan]\ngen_len = 256\nsteps = 128\n[model]\nmax_len = 320\n",
        "math" => "[plan]\ngen_len = 512\nsteps = 256\n[model]\nmax_len = 576\n",
        other => {
            return Err(HarnessError::Config(format!(
                "unknown preset {other:?}; known: {PRESETS:?}"
            )))
        }
    };
    Ok(text.parse::<toml::Table>().expect("preset tables parse"))
}

/// Recursively overlays `top` on `base`.
pub fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `path.to.key=value`. The value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(HarnessError::Config(format!("bad override path {path:?}")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override path {path:?} crosses a non-table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses a document, applying its preset and then `overrides`.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| HarnessError::Config(format!("config parse error: {e}")))?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let mut doc = match user.get("preset") {
            Some(toml::Value::String(p)) => preset_layer(p)?,
            Some(other) => return Err(HarnessError::Config(format!("preset must be a string, got {other}"))),
            None => toml::Table::new(),
        };
        merge(&mut doc, user);
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let json = serde_json::to_vec(&c).expect("run config serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `output_dir`, or `name` under the output root.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match &self.output_dir {
            Some(d) => d.clone(),
            None => {
                let root = std::env::var_os(OUTPUT_ROOT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
                root.join(&self.name)
            }
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let attention = match m.attention {
            AttentionKind::Bidirectional => AttentionMode::Bidirectional,
            AttentionKind::BlockCausal => AttentionMode::BlockCausal {
                block_len: self.plan.block_len,
            },
        };
        let cfg = ModelConfig {
            vocab: Vocab::shared(),
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            max_len: m.max_len,
            ffn_mult: m.ffn_mult,
            attention,
            precision: m.precision,
            tie_output: m.tie_output,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        self.task.spec()
    }

    pub fn sampler(&self) -> SamplerConfig {
        let p = &self.plan;
        let plan = DenoisePlan::new(p.steps, p.selection, p.temperature);
        match p.sampler {
            SamplerKind::Mdlm => SamplerConfig::Mdlm {
                gen_len: p.gen_len,
                plan,
            },
            SamplerKind::Bdlm => SamplerConfig::Bdlm {
                block_len: p.block_len,
                max_blocks: p.max_blocks,
                plan,
            },
        }
    }

    /// Likelihood hook of kind `kind` with this config's estimator knobs.
    pub fn estimator_of(&self, kind: EstimatorKind, k: usize) -> EstimatorConfig {
        let e = &self.estimator;
        let mut est = match kind {
            EstimatorKind::McElbo => EstimatorConfig::mc_elbo(k),
            EstimatorKind::OneStep => EstimatorConfig::one_step(e.fixed_t),
            EstimatorKind::CoupledPair => EstimatorConfig::coupled_pair(),
            EstimatorKind::BlockElbo => EstimatorConfig::block_elbo(k),
            EstimatorKind::Trajectory => EstimatorConfig::trajectory(),
        };
        est.weighted_pair = e.weighted_pair;
        est.shared_noise = e.shared_noise;
        est
    }

    pub fn algorithm(&self) -> Result<AlgorithmSpec> {
        let mut alg = AlgorithmSpec::preset(&self.algorithm.preset)?;
        let e = &self.estimator;
        match e.kind {
            Some(kind) => alg.likelihood = self.estimator_of(kind, e.k),
            None => {
                if matches!(alg.likelihood.kind, EstimatorKind::McElbo | EstimatorKind::BlockElbo) {
                    alg.likelihood.mc_samples = e.k;
                }
                if alg.likelihood.kind == EstimatorKind::OneStep {
                    if let Some(t) = e.fixed_t {
                        alg.likelihood.t_sampling = TimeSampling::Fixed { t };
                    }
                }
                alg.likelihood.weighted_pair = e.weighted_pair;
                alg.likelihood.shared_noise = e.shared_noise;
            }
        }
        alg.policy_loss = PolicyLossConfig {
            clip_eps: self.rl.clip,
            kl_coef: self.rl.kl_coef,
            ratio_level: self.algorithm.ratio_level,
        };
        alg.validate()?;
        Ok(alg)
    }

    pub fn rl_config(&self) -> RlConfig {
        RlConfig {
            steps: self.schedule.steps,
            group_size: self.rl.group_size,
            prompts_per_step: self.rl.prompts_per_step,
            sampler: self.sampler(),
            optim: self.optim,
            eval_every: 0,
            variance_reps: self.rl.variance_reps,
            parallel: self.rl.parallel,
            record_wallclock: self.metrics.wallclock,
        }
    }

    /// Checks everything that can be checked without touching the disk.
    /// Checks everything a run needs before any file is touched. Every
    /// failure is reported as a config error.
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|e| match e {
            HarnessError::Core(c) => HarnessError::Config(c.to_string()),
            other => other,
        })
    }

    fn check(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(HarnessError::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(HarnessError::Config(format!(
                "run name {:?} is not a plain name",
                self.name
            )));
        }
        let cfg = self.model_config()?;
        let task = self.task_spec()?;
        self.algorithm()?;
        self.optim.validate()?;
        let p = &self.plan;
        if p.block_len == 0 || p.steps == 0 || p.gen_len == 0 || p.max_blocks == 0 {
            return Err(HarnessError::Config(
                "plan gen_len, steps, block_len and max_blocks must be positive".into(),
            ));
        }
        let per_call = match p.sampler {
            SamplerKind::Mdlm => p.gen_len,
            SamplerKind::Bdlm => p.block_len,
        };
        DenoisePlan::new(p.steps, p.selection, p.temperature).schedule(per_call)?;
        match (p.sampler, cfg.attention) {
            (SamplerKind::Bdlm, AttentionMode::Bidirectional) => {
                return Err(HarnessError::Config(
                    "the bdlm sampler needs block_causal attention".into(),
                ))
            }
            (SamplerKind::Mdlm, AttentionMode::BlockCausal { .. }) => {
                return Err(HarnessError::Config(
                    "the mdlm sampler needs bidirectional attention".into(),
                ))
            }
            _ => {}
        }
        let sampler = self.sampler();
        if sampler.max_response_len() < task.response_len() {
            return Err(HarnessError::Config(format!(
                "plan generates {} tokens but {:?} responses need {}",
                sampler.max_response_len(),
                task.kind(),
                task.response_len()
            )));
        }
        if self.rl.group_size < 2 || self.rl.prompts_per_step == 0 {
            return Err(HarnessError::Config(
                "rl needs group_size >= 2 and prompts_per_step >= 1".into(),
            ));
        }
        if self.sft.batch_size == 0 || self.dpo.batch_size == 0 || self.dpo.k == 0 {
            return Err(HarnessError::Config("batch sizes and dpo.k must be positive".into()));
        }
        if !(self.dpo.beta > 0.0 && self.dpo.beta.is_finite()) {
            return Err(HarnessError::Config(format!(
                "dpo beta {} must be positive",
                self.dpo.beta
            )));
        }
        if self.estimator.k == 0 || self.estimator.compare_k.contains(&0) {
            return Err(HarnessError::Config("estimator sample counts must be positive".into()));
        }
        if self.estimator.reps < 2 {
            return Err(HarnessError::Config("estimator reps must be at least 2".into()));
        }
        if self.schedule.checkpoint_every == 0 {
            return Err(HarnessError::Config("checkpoint_every must be positive".into()));
        }
        if self.data.train_size == 0 || self.data.pool_size == 0 {
            return Err(HarnessError::Config("train_size and pool_size must be positive".into()));
        }
        Ok(())
    }
}
