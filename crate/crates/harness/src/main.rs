use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dlpt_harness::run::{self, Command, GradCheckOptions, RunOptions, RunStatus};
use dlpt_harness::{HarnessError, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "dlpt",
    version,
    about = "Post-training runs for small diffusion language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set rl.group_size=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p, &self.overrides),
            None => RunConfig::from_toml("", &self.overrides),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Stop after this step, leaving a resumable checkpoint.
    #[arg(long)]
    halt_after: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Supervised fine-tuning.
    Sft(TrainArgs),
    /// Group-relative policy optimization with a verifier reward.
    Rl(TrainArgs),
    /// Preference optimization against a frozen reference.
    Dpo(TrainArgs),
    /// Held-out accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare likelihood estimators on prompt/response pairs.
    Estimate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL file of {"prompt": ..., "response": ...} objects.
        #[arg(long)]
        input: PathBuf,
        /// Also write the table as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Repetitions per estimator (default: estimator.reps).
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 6)]
        max_per_block: usize,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Rebuild report.json and curves.csv from a run's metrics log.
    Report { dir: PathBuf },
    /// Print the resolved config and its digest.
    ShowConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, text)?;
    }
    Ok(())
}

fn train(args: &TrainArgs, command: Command) -> Result<()> {
    let cfg = args.config.load()?;
    let out = run::run_training(
        &cfg,
        command,
        RunOptions {
            halt_after: args.halt_after,
        },
    )?;
    match out.status {
        RunStatus::Completed => {
            eprintln!("{} run complete in {}", command.name(), out.dir.display());
            if let Some(r) = out.report {
                print!("{}", r.to_json());
            }
        }
        RunStatus::Halted { step } => {
            eprintln!("halted after step {step}; rerun the same command to resume");
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Sft(a) => train(&a, Command::Sft),
        Cmd::Rl(a) => train(&a, Command::Rl),
        Cmd::Dpo(a) => train(&a, Command::Dpo),
        Cmd::Eval {
            config,
            checkpoint,
            out,
        } => {
            let report = run::cmd_eval(&config.load()?, &checkpoint)?;
            let text = report.to_json();
            write_out(out.as_deref(), &text)?;
            print!("{text}");
            Ok(())
        }
        Cmd::Estimate {
            config,
            checkpoint,
            input,
            json,
            reps,
        } => {
            let table = run::cmd_estimate(&config.load()?, &checkpoint, &input, reps)?;
            for w in &table.warnings {
                eprintln!("warning: {w}");
            }
            write_out(json.as_deref(), &serde_json::to_string_pretty(&table).expect("table"))?;
            print!("{}", table.render());
            Ok(())
        }
        Cmd::Gradcheck {
            config,
            tolerance,
            max_per_block,
            corrupt_gradient,
        } => {
            let opts = GradCheckOptions {
                tolerance,
                max_per_block,
                corrupt: corrupt_gradient,
            };
            let summary = run::cmd_gradcheck(&config.load()?, opts)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary"));
            if summary.passed {
                Ok(())
            } else {
                let bad: Vec<_> = summary
                    .entries
                    .iter()
                    .filter(|e| !e.passed)
                    .map(|e| e.loss.as_str())
                    .collect();
                Err(HarnessError::GradCheck(bad.join(", ")))
            }
        }
        Cmd::Report { dir } => {
            print!("{}", dlpt_harness::report::regenerate(&dir)?.to_json());
            Ok(())
        }
        Cmd::ShowConfig { config } => {
            let cfg = config.load()?;
            println!("# digest {}", cfg.digest());
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
