//! `cil`: config-driven runner for class-incremental learning experiments.
//!
//! Exit codes: 0 success, 1 validation/config error, 2 numerical failure
//! (non-finite values or a failed gradient check), 3 I/O or format error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use cil_core::Error;
use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "cil", version, about = "Class-incremental learning experiment runner")]
struct Cli {
    /// Experiment config (JSON). Defaults to a built-in synthetic-blob demo.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for sweep cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the multitask base model and write a snapshot + epoch log.
    TrainBase {
        /// Task sizes as a comma list, e.g. "5,4,3,2" (overrides the plan).
        #[arg(long)]
        heads: Option<String>,
    },
    /// Run the incremental pipeline from a base snapshot.
    RunCil {
        /// Path to a base_model.cilm snapshot.
        #[arg(long)]
        base: PathBuf,
    },
    /// Run the six-row loss ablation (CE/KD x new/old samples).
    AblateLosses,
    /// Sweep task-plan shapes (both exploration directions).
    SweepHeads,
    /// Sweep the exemplar budget K.
    SweepExemplars,
    /// Verify analytic gradients against finite differences.
    Gradcheck,
    /// Generate the configured synthetic dataset as a dataset directory.
    Synth,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::NonFinite(_) => 2,
        Error::Io(_) | Error::Format(_) | Error::Json(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(cli.seed, cli.out.clone());
    match &cli.command {
        Command::TrainBase { heads } => commands::cmd_train_base(&cfg, heads.as_deref()),
        Command::RunCil { base } => commands::cmd_run_cil(&cfg, base),
        Command::AblateLosses => commands::cmd_ablate_losses(&cfg, cli.jobs),
        Command::SweepHeads => commands::cmd_sweep_heads(&cfg, cli.jobs),
        Command::SweepExemplars => commands::cmd_sweep_exemplars(&cfg, cli.jobs),
        Command::Gradcheck => commands::cmd_gradcheck(),
        Command::Synth => commands::cmd_synth(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
