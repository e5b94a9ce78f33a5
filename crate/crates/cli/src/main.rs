//! `scam` — train, search, diagnose and evaluate forecasters from one TOML config.
//!
//! Precedence: command-line flags override the config file, which overrides
//! built-in defaults. Exit status is 0 on success, 2 for configuration errors
//! and 1 for any other failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scam::experiment::{self, ExperimentConfig, Overrides};
use scam::models::SnrPlacement;
use scam::training::TrainMode;
use scam::Error;

#[derive(Parser)]
#[command(name = "scam", version, about = "Self-correcting pseudo-label training for MLP forecasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Supervised,
    GridSearch,
    CoObjective,
    Scam,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Supervised => TrainMode::Supervised,
            ModeArg::GridSearch => TrainMode::GridSearch,
            ModeArg::CoObjective => TrainMode::CoObjective,
            ModeArg::Scam => TrainMode::Scam,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SnrArg {
    None,
    Pre,
    Post,
    Both,
}

impl From<SnrArg> for SnrPlacement {
    fn from(s: SnrArg) -> Self {
        match s {
            SnrArg::None => SnrPlacement::None,
            SnrArg::Pre => SnrPlacement::Pre,
            SnrArg::Post => SnrPlacement::Post,
            SnrArg::Both => SnrPlacement::Both,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output location; overrides `output_dir` (or the CSV path for `synth`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode_override: Option<ModeArg>,
    #[arg(long, value_enum)]
    snr: Option<SnrArg>,
    /// Worker threads for seed fan-out (0 = one per core).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured mode for every seed.
    Train(Common),
    /// Run the candidate grid search and write its trajectory table.
    GridSearch(Common),
    /// Write mask dumps, loss breakdowns, sharpness and alignment reports for a checkpoint.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the configured synthetic series as CSV.
    Synth(Common),
    /// Evaluate a checkpoint and print its metrics as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Common {
    fn load(&self) -> scam::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            output_dir: self.out.clone(),
            mode: self.mode_override.map(Into::into),
            snr: self.snr.map(Into::into),
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> scam::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> scam::Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.load()?;
            let runs = experiment::run_training(&cfg, c.threads)?;
            for r in &runs {
                log::info!("{}: best epoch {}, test mse {:.6} mae {:.6}", r.run_id, r.best_epoch, r.test.mse, r.test.mae);
            }
            print_json(&runs)
        }
        Command::GridSearch(c) => {
            let cfg = c.load()?;
            let tables = experiment::run_grid_search(&cfg, c.threads)?;
            log::info!("grid search wrote {} run(s) under {}", tables.len(), cfg.output_dir.display());
            Ok(())
        }
        Command::Diagnose { common, checkpoint } => {
            let cfg = common.load()?;
            let dir = common.out.clone().unwrap_or_else(|| default_diagnose_dir(&checkpoint));
            let report = experiment::run_diagnose(&cfg, &checkpoint, &dir)?;
            log::info!("diagnostics written to {}", dir.display());
            print_json(&report.sharpness)
        }
        Command::Synth(c) => {
            // --out names the CSV here, not a directory
            let cfg = ExperimentConfig::load(&c.config)?;
            let path = c.out.clone().unwrap_or_else(|| cfg.output_dir.join("synthetic.csv"));
            let series = experiment::run_synth(&cfg, c.seed, &path)?;
            log::info!("wrote {} rows to {}", series.len(), path.display());
            Ok(())
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            print_json(&experiment::run_eval(&cfg, &checkpoint)?)
        }
    }
}

/// `<run>/checkpoints/best.ckpt` → `<run>/diagnostics`.
fn default_diagnose_dir(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .and_then(Path::parent)
        .unwrap_or(Path::new("."))
        .join("diagnostics")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
