//! `stmd` command line: synthetic data generation, training, one-pass
//! evaluation, ablations, and figure emission.
//!
//! Exit codes: 0 success, 1 internal failure, 2 usage/config error.

mod commands;
mod config;
mod plotting;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::UsageError;

#[derive(Parser)]
#[command(name = "stmd", version, about = "Point-cloud single-object tracker")]
struct Cli {
    /// JSON config file (defaults apply for missing keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config key (repeatable), e.g. --set tracker.sigma=1.5.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Overwrite non-empty output directories.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into an output directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a tracker on a generated benchmark (config key data_dir).
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Worker threads for per-sequence parallelism (0 = logical cores).
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Train and evaluate every variant along one ablation axis.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        /// One of: padding, sigma, memory, temporal.
        #[arg(long)]
        axis: String,
    },
    /// Render Success/Precision curves and IoU traces from results JSON.
    Plot {
        #[arg(long)]
        out: PathBuf,
        /// Directory containing TrackResult *.json files.
        #[arg(long)]
        results: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let usage = err.downcast_ref::<UsageError>().is_some()
                || err.downcast_ref::<stmd_core::CoreError>().is_some_and(|e| {
                    matches!(
                        e,
                        stmd_core::CoreError::Config(_)
                            | stmd_core::CoreError::Argument(_)
                            | stmd_core::CoreError::Parse { .. }
                            | stmd_core::CoreError::Format { .. }
                            | stmd_core::CoreError::Version(_)
                    )
                })
                || err.to_string().contains("config");
            if usage {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = config::load_config(cli.config.as_deref(), cli.seed, &cli.sets)
        .map_err(|e| commands::usage(format!("{e:#}")))?;
    match cli.command {
        Command::GenData { out } => commands::cmd_gen_data(&cfg, &out, cli.force),
        Command::Train { out } => commands::cmd_train(&cfg, &out, cli.force),
        Command::Eval {
            out,
            checkpoint,
            workers,
        } => {
            let workers = if workers == 0 {
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            } else {
                workers
            };
            commands::cmd_eval(&cfg, &checkpoint, &out, cli.force, workers)
        }
        Command::Ablate { out, axis } => commands::cmd_ablate(&cfg, &axis, &out, cli.force),
        Command::Plot { out, results } => commands::cmd_plot(&results, &out, cli.force),
    }
}
