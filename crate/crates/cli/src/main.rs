//! `msd`: data generation, training, evaluation and verification from the
//! command line.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 configuration or
//! validation error, 3 training failed, 4 I/O or file-format error.

mod ablate;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msd_core::data::{generate_dataset, read_dataset, write_dataset, Generator, GenConfig, PairedDataset};
use msd_core::eval::{evaluate, EvalReport};
use msd_core::gradcheck::{run_grad_check, GradCheckConfig};
use msd_core::losses::LossMode;
use msd_core::rfbe::{check_equivalence, divisors, EquivalenceConfig};
use msd_core::trainer::{load_checkpoint, train, RunDir, RunStatus};
use msd_core::Error;
use serde_json::json;

use config::RunConfigFile;

#[derive(Debug)]
pub enum CliError {
    Check(String),
    Config(String),
    Training(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Training(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Check(m) | CliError::Config(m) | CliError::Training(m) | CliError::Io(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Format { .. } | Error::Json(_) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io_err(what: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("cannot {what} {}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "msd", version, about = "Momentum self-distillation training on paired synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes metrics, checkpoints and status.json into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `loss.mode` from the config.
        #[arg(long)]
        mode: Option<LossMode>,
        /// Continue from the latest checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the JSON report.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare every tape operation and loss against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Corrupt analytic gradients; the check must then fail.
        #[arg(long, hide = true)]
        sabotage: bool,
    },
    /// Compare accumulated sub-batch steps with a single large-batch step.
    RfbeCheck {
        #[arg(long = "N", alias = "n", default_value_t = 64)]
        primary: usize,
        /// Comma-separated sub-batch sizes; defaults to every divisor of N.
        #[arg(long = "b-list", value_delimiter = ',')]
        b_list: Option<Vec<usize>>,
        #[arg(long, default_value = "msd")]
        mode: LossMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        queue_capacity: usize,
        /// Also measure the accumulated peak at this larger primary batch.
        #[arg(long = "compare-N", alias = "compare-n")]
        compare_primary: Option<usize>,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        /// Grid JSON; the built-in grid is used when omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn load_data(path: &Path) -> Result<PairedDataset, CliError> {
    read_dataset(path).map_err(|e| match e {
        Error::Io(io) => io_err("read dataset", path, io),
        other => CliError::Io(format!("{}: {other}", path.display())),
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err("write", path, e))
}

fn cmd_gen_data(config: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = RunConfigFile::load(config)?;
    let ds = generate_dataset(&cfg.gen_config())?;
    write_dataset(&ds, out).map_err(|e| match e {
        Error::Io(io) => io_err("write dataset", out, io),
        other => other.into(),
    })?;
    println!("wrote {} samples to {}", ds.len(), out.display());
    Ok(())
}

fn cmd_train(config: &Path, data: &Path, out: &Path, mode: Option<LossMode>, resume: bool) -> Result<(), CliError> {
    let mut cfg = RunConfigFile::load(config)?;
    if let Some(m) = mode {
        cfg.loss.mode = m;
    }
    let ds = load_data(data)?;
    std::fs::create_dir_all(out).map_err(|e| io_err("create", out, e))?;
    let dir = RunDir::new(out);
    let outcome = train(&cfg.train_config(), &cfg.gen_config(), &ds, Some(&dir), resume)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let status = json!({
        "status": outcome.status,
        "reason": outcome.state.failure,
        "mode": cfg.loss.mode,
        "epochs": outcome.state.epoch,
        "steps": outcome.state.step,
        "final_loss": outcome.epochs.last().and_then(|r| r.loss),
    });
    write_json(&out.join("status.json"), &status)?;
    match outcome.status {
        RunStatus::Completed => {
            println!("training completed: {} epochs, {} steps", outcome.state.epoch, outcome.state.step);
            Ok(())
        }
        RunStatus::TrainingFailed => Err(CliError::Training(format!(
            "training_failed: {}",
            outcome.state.failure.unwrap_or_default()
        ))),
    }
}

/// Generator settings matching a dataset file, for the class prototypes.
fn prototype_config(ds: &PairedDataset, cfg: &RunConfigFile) -> GenConfig {
    GenConfig { seed: ds.seed, n: ds.len(), d_a: ds.d_a(), d_b: ds.d_b(), classes: ds.classes, ..cfg.gen.clone() }
}

pub fn run_eval(ds: &PairedDataset, model: &msd_core::model::DualEncoder, cfg: &RunConfigFile) -> Result<EvalReport, CliError> {
    let (train_ids, test_ids) = ds.split(cfg.train.test_fraction)?;
    let prototypes = Generator::new(&prototype_config(ds, cfg))?.class_prototypes()?.1;
    Ok(evaluate(model, ds, &train_ids, &test_ids, &prototypes, &cfg.eval, cfg.seed, cfg.echo())?)
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let cfg = match config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::with_seed(0),
    };
    let ds = load_data(data)?;
    let (state, _) = load_checkpoint(checkpoint).map_err(|e| match e {
        Error::Io(io) => io_err("read checkpoint", checkpoint, io),
        other => CliError::Io(format!("{}: {other}", checkpoint.display())),
    })?;
    let report = run_eval(&ds, &state.model, &cfg)?;
    write_json(out, &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_grad_check(seed: u64, instances: usize, sabotage: bool) -> Result<(), CliError> {
    let report = run_grad_check(&GradCheckConfig { seed, instances, sabotage, ..Default::default() })?;
    print!("{}", report.to_table());
    if report.passed {
        println!("all checks passed");
        Ok(())
    } else {
        let failed: Vec<&str> = report.ops.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
        Err(CliError::Check(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn cmd_rfbe_check(cfg: EquivalenceConfig) -> Result<(), CliError> {
    let report = check_equivalence(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?);
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Check("accumulated and monolithic steps disagree".into()))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out } => cmd_gen_data(&config, &out),
        Command::Train { config, data, out, mode, resume } => cmd_train(&config, &data, &out, mode, resume),
        Command::Eval { checkpoint, data, out, config } => cmd_eval(&checkpoint, &data, &out, config.as_deref()),
        Command::GradCheck { seed, instances, sabotage } => cmd_grad_check(seed, instances, sabotage),
        Command::RfbeCheck { primary, b_list, mode, seed, queue_capacity, compare_primary } => {
            if mode == LossMode::End2end {
                return Err(CliError::Config("rfbe-check needs a momentum mode (msd or onehot)".into()));
            }
            cmd_rfbe_check(EquivalenceConfig {
                primary,
                sub_batches: b_list.unwrap_or_else(|| divisors(primary)),
                mode,
                seed,
                queue_capacity,
                compare_primary,
                ..Default::default()
            })
        }
        Command::Ablate { grid, data, out, config, jobs } => {
            ablate::cmd_ablate(grid.as_deref(), &data, &out, config.as_deref(), jobs)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
