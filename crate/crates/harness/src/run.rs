//! The training, evaluation and diagnostic commands.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use dlpt_core::alignment::{
    dpo_vrpo_loss, read_preference_corpus, read_sft_corpus, sft_loss, train_dpo, train_sft, DpoConfig, PreferencePair,
    SftConfig, SftExample,
};
use dlpt_core::executor::{evaluate_accuracy, train_rl};
use dlpt_core::likelihood::{
    exact_elbo_oracle, plan_surrogate, variance_probe, EstimatorConfig, EstimatorKind, ORACLE_MAX_LEN,
};
use dlpt_core::model::{
    block_nelbo_term, grad_check, nelbo_term, AttentionMode, Checkpoint, DenoiserParams, Gradients, ModelConfig,
};
use dlpt_core::rng::RngStream;
use dlpt_core::seq::{corrupt, corrupt_block, MaskedState, NoiseSchedule};
use dlpt_core::tasks::{generate_dataset, TaskInstance};
use dlpt_core::train::{Flow, MetricsRecord, RunHooks, TrainState};
use dlpt_core::vocab::{TokenSeq, Vocab};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::lock::RunLock;
use crate::metrics::{MetricsHeader, MetricsWriter, METRICS_FILE};
use crate::report::{regenerate, RunReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const MANIFEST_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Sft,
    Rl,
    Dpo,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sft => "sft",
            Self::Rl => "rl",
            Self::Dpo => "dpo",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Stop after this step as if killed right after its checkpoint.
    pub halt_after: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Halted { step: u64 },
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub dir: PathBuf,
    pub digest: String,
    /// Written only on completion.
    pub report: Option<RunReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub command: Command,
    pub digest: String,
    pub init_digest: Option<String>,
}

/// Task instances of one data split.
pub fn split(cfg: &RunConfig, label: &str, n: usize) -> Result<Vec<TaskInstance>> {
    let spec = cfg.task_spec()?;
    Ok(generate_dataset(
        &spec,
        n,
        &RngStream::new(cfg.seed, format!("data-{label}")),
    )?)
}

fn sft_examples(vocab: &Vocab, items: &[TaskInstance]) -> Result<Vec<SftExample>> {
    items
        .iter()
        .map(|i| {
            let (prompt, response) = i.sft_pair(vocab)?;
            Ok(SftExample { prompt, response })
        })
        .collect()
}

/// Chosen is the reference answer; rejected replaces every answer token
/// with a different content symbol.
pub fn preference_pairs(vocab: &Vocab, items: &[TaskInstance], rng: &RngStream) -> Result<Vec<PreferencePair>> {
    let content: Vec<_> = vocab.content_ids().collect();
    items
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let (prompt, chosen) = inst.sft_pair(vocab)?;
            let mut r = rng.child(i);
            let rejected = chosen
                .ids()
                .iter()
                .map(|&t| {
                    if t == vocab.eos_id {
                        return t;
                    }
                    loop {
                        let c = content[r.below(content.len())];
                        if c != t {
                            return c;
                        }
                    }
                })
                .collect::<Vec<_>>();
            Ok(PreferencePair {
                prompt,
                chosen,
                rejected: TokenSeq(rejected),
            })
        })
        .collect()
}

fn open_jsonl(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))
}

enum Data {
    Sft(Vec<SftExample>, Vec<SftExample>),
    Rl(Vec<TaskInstance>),
    Dpo(Vec<PreferencePair>, Vec<PreferencePair>),
}

/// Everything a training command needs, built before touching the disk.
struct Prepared {
    cfg: RunConfig,
    model: ModelConfig,
    digest: String,
    dir: PathBuf,
    data: Data,
    heldout: Vec<TaskInstance>,
    init: Option<Checkpoint>,
    total: u64,
}

fn prepare(cfg: &RunConfig, command: Command) -> Result<Prepared> {
    cfg.validate()?;
    let model = cfg.model_config()?;
    let vocab = &model.vocab;
    let heldout = split(cfg, "heldout", cfg.data.heldout_size)?;
    let (data, total) = match command {
        Command::Sft => {
            let train = match &cfg.data.sft_corpus {
                Some(p) => read_sft_corpus(open_jsonl(p)?, vocab)?,
                None => sft_examples(vocab, &split(cfg, "train", cfg.data.train_size)?)?,
            };
            let held = sft_examples(vocab, &heldout)?;
            for ex in train.iter().chain(&held) {
                ex.validate(&model)?;
            }
            let per_epoch = train.len().div_ceil(cfg.sft.batch_size) as u64;
            (Data::Sft(train, held), per_epoch * cfg.schedule.epochs as u64)
        }
        Command::Rl => (Data::Rl(split(cfg, "pool", cfg.data.pool_size)?), cfg.schedule.steps),
        Command::Dpo => {
            let rng = RngStream::new(cfg.seed, "data-rejected");
            let train = match &cfg.data.preference_corpus {
                Some(p) => read_preference_corpus(open_jsonl(p)?, vocab)?,
                None => preference_pairs(vocab, &split(cfg, "train", cfg.data.train_size)?, &rng.child("train"))?,
            };
            let held = preference_pairs(vocab, &heldout, &rng.child("heldout"))?;
            for p in train.iter().chain(&held) {
                p.validate()?;
                for r in [&p.chosen, &p.rejected] {
                    SftExample {
                        prompt: p.prompt.clone(),
                        response: r.clone(),
                    }
                    .validate(&model)?;
                }
            }
            (Data::Dpo(train, held), cfg.schedule.steps)
        }
    };
    if total == 0 {
        return Err(HarnessError::Config("the schedule has no steps".into()));
    }
    let init = match &cfg.init_checkpoint {
        Some(p) => {
            let ck =
                Checkpoint::load(p).map_err(|e| HarnessError::Config(format!("cannot load {}: {e}", p.display())))?;
            ck.params(&model)?;
            Some(ck)
        }
        None => None,
    };
    Ok(Prepared {
        digest: cfg.digest(),
        dir: cfg.resolved_output_dir(),
        cfg: cfg.clone(),
        model,
        data,
        heldout,
        init,
        total,
    })
}

fn save_checkpoint(dir: &Path, state: &TrainState, digest: &str) -> Result<()> {
    state.to_checkpoint(digest).save(&dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

struct HarnessHooks<'a> {
    writer: MetricsWriter,
    dir: &'a Path,
    digest: &'a str,
    model: &'a ModelConfig,
    cfg: &'a RunConfig,
    heldout: &'a [TaskInstance],
    total: u64,
    halt_after: Option<u64>,
    halted: Option<u64>,
}

impl RunHooks for HarnessHooks<'_> {
    fn on_step(&mut self, state: &TrainState, record: &MetricsRecord) -> dlpt_core::Result<Flow> {
        let mut rec = record.clone();
        let every = self.cfg.schedule.eval_every;
        let last = state.step == self.total;
        if (last || (every > 0 && state.step.is_multiple_of(every))) && !self.heldout.is_empty() {
            rec.accuracy = Some(evaluate_accuracy(
                &state.params,
                self.model,
                &self.cfg.sampler(),
                self.heldout,
                self.cfg.seed,
            )?);
        }
        self.writer.write(&rec).map_err(core_err)?;
        let halt = self.halt_after == Some(state.step);
        if last || halt || state.step.is_multiple_of(self.cfg.schedule.checkpoint_every) {
            save_checkpoint(self.dir, state, self.digest).map_err(core_err)?;
        }
        if halt {
            self.halted = Some(state.step);
            return Ok(Flow::Stop);
        }
        Ok(Flow::Continue)
    }
}

fn core_err(e: HarnessError) -> dlpt_core::Error {
    match e {
        HarnessError::Core(c) => c,
        HarnessError::Io(io) => dlpt_core::Error::Io(io),
        other => dlpt_core::Error::Integrity(other.to_string()),
    }
}

/// Runs (or resumes) a training command in its output directory.
pub fn run_training(cfg: &RunConfig, command: Command, opts: RunOptions) -> Result<RunOutcome> {
    let p = prepare(cfg, command)?;
    std::fs::create_dir_all(&p.dir)?;
    let _lock = RunLock::acquire(&p.dir)?;
    let manifest = Manifest {
        format: "dlpt-run".into(),
        version: 1,
        command,
        digest: p.digest.clone(),
        init_digest: p.init.as_ref().map(|c| c.digest.clone()),
    };
    let manifest_path = p.dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let old: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
            .map_err(|e| HarnessError::Mismatch(format!("unreadable {}: {e}", manifest_path.display())))?;
        if old != manifest {
            return Err(HarnessError::Mismatch(format!(
                "{} holds {} run {}, not {} run {}",
                p.dir.display(),
                old.command.name(),
                old.digest,
                command.name(),
                p.digest
            )));
        }
    } else {
        std::fs::write(
            &manifest_path,
            serde_json::to_string_pretty(&manifest).expect("manifest") + "\n",
        )?;
        std::fs::write(p.dir.join(CONFIG_FILE), p.cfg.to_toml())?;
    }

    let ck_path = p.dir.join(CHECKPOINT_FILE);
    let header = MetricsHeader::new(command.name(), &p.digest);
    let metrics_path = p.dir.join(METRICS_FILE);
    let (mut state, writer) = if ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        let state = TrainState::from_checkpoint(&ck, &p.model, &p.digest).map_err(|e| match e {
            dlpt_core::Error::Integrity(m) => HarnessError::Mismatch(m),
            other => other.into(),
        })?;
        let w = MetricsWriter::resume(&metrics_path, &header, state.step)?;
        (state, w)
    } else {
        let params = match &p.init {
            Some(ck) => ck.params(&p.model)?,
            None => DenoiserParams::init(&p.model, &mut RngStream::new(cfg.seed, "init"))?,
        };
        let state = TrainState::new(params, cfg.seed, &cfg.optim);
        (state, MetricsWriter::create(&metrics_path, &header)?)
    };

    let mut hooks = HarnessHooks {
        writer,
        dir: &p.dir,
        digest: &p.digest,
        model: &p.model,
        cfg: &p.cfg,
        heldout: &p.heldout,
        total: p.total,
        halt_after: opts.halt_after,
        halted: None,
    };
    let c = &p.cfg;
    match &p.data {
        Data::Sft(train, held) => {
            let sc = SftConfig {
                epochs: c.schedule.epochs,
                batch_size: c.sft.batch_size,
                optim: c.optim,
                record_wallclock: c.metrics.wallclock,
            };
            train_sft(&mut state, &p.model, train, held, &sc, &mut hooks)?;
        }
        Data::Rl(pool) => {
            let alg = c.algorithm()?;
            train_rl(&mut state, &p.model, &alg, &c.rl_config(), pool, &[], &mut hooks)?;
        }
        Data::Dpo(train, held) => {
            let every = c.schedule.eval_every;
            let dc = DpoConfig {
                steps: c.schedule.steps,
                batch_size: c.dpo.batch_size,
                beta: c.dpo.beta,
                estimator: c.estimator_of(EstimatorKind::McElbo, c.dpo.k),
                optim: c.optim,
                eval_every: if every == 0 { c.schedule.steps } else { every },
                record_wallclock: c.metrics.wallclock,
            };
            train_dpo(&mut state, &p.model, train, held, &dc, &mut hooks)?;
        }
    }
    let halted = hooks.halted;
    drop(hooks);
    if let Some(step) = halted {
        return Ok(RunOutcome {
            status: RunStatus::Halted { step },
            dir: p.dir,
            digest: p.digest,
            report: None,
        });
    }
    if state.step < p.total {
        return Err(HarnessError::Core(dlpt_core::Error::Integrity(format!(
            "run stopped at step {} of {}",
            state.step, p.total
        ))));
    }
    let report = regenerate(&p.dir)?;
    Ok(RunOutcome {
        status: RunStatus::Completed,
        dir: p.dir,
        digest: p.digest,
        report: Some(report),
    })
}

fn load_checked(cfg: &RunConfig, model: &ModelConfig, path: &Path) -> Result<(Checkpoint, TrainState)> {
    let ck = Checkpoint::load(path)?;
    let digest = cfg.digest();
    if ck.digest != digest {
        return Err(HarnessError::Mismatch(format!(
            "checkpoint {} was written by run {}, config digest is {digest}",
            path.display(),
            ck.digest
        )));
    }
    let state = TrainState::from_checkpoint(&ck, model, &digest)?;
    Ok((ck, state))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub digest: String,
    pub checkpoint_step: u64,
    pub instances: usize,
    pub accuracy: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("eval report serializes") + "\n"
    }
}

/// Greedy held-out accuracy of a checkpoint written under `cfg`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let model = cfg.model_config()?;
    let (_, state) = load_checked(cfg, &model, checkpoint)?;
    let heldout = split(cfg, "heldout", cfg.data.heldout_size)?;
    let accuracy = evaluate_accuracy(&state.params, &model, &cfg.sampler(), &heldout, cfg.seed)?;
    Ok(EvalReport {
        format: "dlpt-eval".into(),
        version: 1,
        digest: cfg.digest(),
        checkpoint_step: state.step,
        instances: heldout.len(),
        accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub input: usize,
    pub estimator: String,
    pub k: usize,
    pub mean: f64,
    pub var: f64,
    pub se: f64,
    pub oracle: Option<f64>,
    pub bias: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimateTable {
    pub rows: Vec<EstimateRow>,
    pub warnings: Vec<String>,
}

impl EstimateTable {
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:>5}  {:<12}  {:>3}  {:>14}  {:>12}  {:>10}  {:>14}  {:>11}\n",
            "input", "estimator", "k", "mean", "variance", "se", "oracle", "bias"
        );
        for r in &self.rows {
            let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
            let _ = writeln!(
                out,
                "{:>5}  {:<12}  {:>3}  {:>14.6}  {:>12.6}  {:>10.6}  {:>14}  {:>11}",
                r.input,
                r.estimator,
                r.k,
                r.mean,
                r.var,
                r.se,
                opt(r.oracle, 6),
                opt(r.bias, 6)
            );
        }
        out
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateInput {
    prompt: String,
    response: String,
}

/// Compares the likelihood estimators on each `(prompt, response)` line of
/// `input`, with the exact oracle where the response is short enough.
/// `reps` overrides the configured repetition count.
pub fn cmd_estimate(cfg: &RunConfig, checkpoint: &Path, input: &Path, reps: Option<usize>) -> Result<EstimateTable> {
    cfg.validate()?;
    let model = cfg.model_config()?;
    let (_, state) = load_checked(cfg, &model, checkpoint)?;
    let reps = reps.unwrap_or(cfg.estimator.reps);
    if reps < 2 {
        return Err(HarnessError::Config("estimates need at least 2 reps".into()));
    }
    let text = std::fs::read_to_string(input)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", input.display())))?;
    let mut estimators: Vec<EstimatorConfig> = vec![cfg.estimator_of(EstimatorKind::OneStep, 1)];
    estimators.push(cfg.estimator_of(EstimatorKind::CoupledPair, 1));
    for &k in &cfg.estimator.compare_k {
        estimators.push(cfg.estimator_of(EstimatorKind::McElbo, k));
    }
    if model.block_len().is_some() {
        estimators.push(cfg.estimator_of(EstimatorKind::BlockElbo, cfg.estimator.k));
    }
    let mut table = EstimateTable::default();
    let root = RngStream::new(cfg.seed, "estimate");
    let lines = text.lines().filter(|l| !l.trim().is_empty());
    for (i, line) in lines.enumerate() {
        let item: EstimateInput =
            serde_json::from_str(line).map_err(|e| HarnessError::Config(format!("input line {}: {e}", i + 1)))?;
        let prompt = model.vocab.encode(&item.prompt)?;
        let response = model.vocab.encode(&item.response)?;
        let oracle = if !cfg.estimator.oracle {
            None
        } else if response.len() > ORACLE_MAX_LEN {
            table.warnings.push(format!(
                "input {i}: response length {} exceeds {ORACLE_MAX_LEN}; oracle column omitted",
                response.len()
            ));
            None
        } else {
            Some(exact_elbo_oracle(&state.params, &model, &prompt, &response)?)
        };
        for est in &estimators {
            let rng = root.child(i).child(format!("{}-{}", est.kind.name(), est.mc_samples));
            let v = variance_probe(&state.params, &model, est, &prompt, &response, None, reps, &rng)?;
            table.rows.push(EstimateRow {
                input: i,
                estimator: est.kind.name().to_string(),
                k: est.mc_samples,
                mean: v.mean,
                var: v.var,
                se: v.se,
                oracle,
                bias: oracle.map(|o| v.mean - o),
            });
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub loss: String,
    pub max_rel_error: f64,
    pub passed: bool,
    pub worst_block: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSummary {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub max_per_block: usize,
    /// Negative control: scale every analytic gradient by 1.01.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            max_per_block: 6,
            corrupt: false,
        }
    }
}

type LossFn<'a> = Box<dyn Fn(&DenoiserParams) -> dlpt_core::Result<(f64, Gradients)> + Sync + 'a>;

/// Finite-difference check of every loss against the config's model.
pub fn cmd_gradcheck(cfg: &RunConfig, opts: GradCheckOptions) -> Result<GradCheckSummary> {
    cfg.validate()?;
    let model = cfg.model_config()?;
    let vocab = model.vocab.clone();
    let block = 4;
    let bi = ModelConfig {
        attention: AttentionMode::Bidirectional,
        ..model.clone()
    };
    let bc = ModelConfig {
        attention: AttentionMode::BlockCausal { block_len: block },
        ..model.clone()
    };
    let mut rng = RngStream::new(cfg.seed, "gradcheck");
    let params = DenoiserParams::init(&bi, &mut rng.child("init"))?;
    let reference = DenoiserParams::init(&bi, &mut rng.child("ref"))?;
    let content: Vec<_> = vocab.content_ids().collect();
    let mut draw = |n: usize| TokenSeq((0..n).map(|_| content[rng.below(content.len())]).collect());
    let prompt = draw(3);
    let response = draw(5);
    let rejected = draw(5);
    let x0 = TokenSeq([prompt.ids(), response.ids()].concat());
    let masked = |m: MaskedState| {
        if m.ids.contains(&vocab.mask_id) {
            m
        } else {
            let mut m = m;
            m.ids[0] = vocab.mask_id;
            m
        }
    };
    let t = 0.5;
    let xt = masked(corrupt(
        &x0,
        t,
        NoiseSchedule::Linear,
        &vocab,
        &mut RngStream::new(cfg.seed, "gc-xt"),
    )?);
    let xb = corrupt_block(
        &x0,
        2,
        block,
        t,
        NoiseSchedule::Linear,
        &vocab,
        &mut RngStream::new(cfg.seed, "gc-xb"),
    )?;
    let xb = if xb.ids[block..2 * block].contains(&vocab.mask_id) {
        xb
    } else {
        let mut m = xb;
        m.ids[block] = vocab.mask_id;
        m
    };
    let mut resp_eos = response.clone();
    resp_eos.0.push(vocab.eos_id);
    let ex = SftExample {
        prompt: prompt.clone(),
        response: resp_eos,
    };
    let pair = PreferencePair {
        prompt: prompt.clone(),
        chosen: response.clone(),
        rejected,
    };
    let mc = EstimatorConfig::mc_elbo(2);
    let seed = cfg.seed;
    let surrogate_plan = plan_surrogate(&bi, &mc, &prompt, &response, None, &mut RngStream::new(seed, "gc-plan"))?;

    let losses: Vec<(&str, &ModelConfig, LossFn)> = vec![
        ("nelbo", &bi, Box::new(|p| nelbo_term(p, &bi, &x0, &xt, t))),
        (
            "block_nelbo",
            &bc,
            Box::new(|p| block_nelbo_term(p, &bc, &x0, 2, block, &xb, t)),
        ),
        (
            "sft",
            &bi,
            Box::new(|p| sft_loss(p, &bi, &ex, t, &mut RngStream::new(seed, "gc-sft"))),
        ),
        (
            "sft_block",
            &bc,
            Box::new(|p| sft_loss(p, &bc, &ex, t, &mut RngStream::new(seed, "gc-sft"))),
        ),
        (
            "mc_elbo",
            &bi,
            Box::new(|p| surrogate_plan.value_and_grad(p, &bi, 1.0).map(|(s, g)| (s.value, g))),
        ),
        (
            "dpo",
            &bi,
            Box::new(|p| {
                dpo_vrpo_loss(
                    p,
                    &reference,
                    &bi,
                    &pair,
                    0.5,
                    &mc,
                    &RngStream::new(seed, "gc-dpo"),
                    true,
                )
                .map(|o| (o.loss, o.grads))
            }),
        ),
    ];
    let mut entries = Vec::new();
    for (name, mcfg, f) in &losses {
        let report = if opts.corrupt {
            let bad = |p: &DenoiserParams| {
                f(p).map(|(l, mut g)| {
                    g.scale(1.01);
                    (l, g)
                })
            };
            grad_check(&params, mcfg, bad, opts.tolerance, Some(opts.max_per_block))?
        } else {
            grad_check(&params, mcfg, f, opts.tolerance, Some(opts.max_per_block))?
        };
        let worst = report
            .blocks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .map(|b| b.name.clone())
            .unwrap_or_default();
        entries.push(GradCheckEntry {
            loss: name.to_string(),
            max_rel_error: report.max_rel_error,
            passed: report.passed,
            worst_block: worst,
        });
    }
    let passed = entries.iter().all(|e| e.passed);
    Ok(GradCheckSummary {
        tolerance: opts.tolerance,
        entries,
        passed,
    })
}
