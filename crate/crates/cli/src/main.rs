//! `bsdenet` — drives the pricing/hedging pipeline from one TOML config:
//! simulate paths, train the network stack, price from a checkpoint, run
//! the regression baseline, solve the 1-D reference problem, simulate a
//! delta hedge, compare a model against the reference, and report
//! predicted/measured resource costs.
//!
//! Exit codes: 0 success, 1 config/validation failure, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod artifacts;
mod commands;
mod config;

use commands::HedgeProviderKind;
use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// The config (or flag combination) is invalid; one message per
    /// offending key.
    Validation(Vec<String>),
    /// The config was fine but the run failed.
    Runtime(String),
}

impl CliError {
    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }
}

#[derive(Parser)]
#[command(
    name = "bsdenet",
    version,
    about = "High-dimensional American option pricing: network stack, regression baseline, 1-D reference, hedging",
    long_about = None
)]
struct Cli {
    /// TOML run config; every key has a default, so a missing file (when
    /// not explicitly given) or an empty file runs the seven-asset
    /// reference setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory override (defaults to the config's `output_dir`).
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Worker threads for path- and member-parallel stages
    /// (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// On failure, print a machine-readable error JSON to stdout.
    #[arg(long, global = true)]
    error_json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate paths under the config's market and dump them as CSV.
    Simulate {
        /// Path count (default: train.members × train.paths_per_member).
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Run the backward training sweep; writes the checkpoint, the value
    /// surface, the training log, and t=0 estimates.
    Train,
    /// Price at t=0 from a checkpoint on fresh paths, using the model's
    /// exercise rule.
    Price {
        /// Checkpoint to load (default: <output_dir>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fresh evaluation paths.
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        /// Path seed (default: config seed + 1).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the least-squares regression baseline on simulated paths.
    Lsm,
    /// Solve the 1-D reduced problem on the oracle grid; writes the t=0
    /// slice and the interpolated price/delta at the initial state.
    Fd,
    /// Simulate a discrete delta hedge of one short option per path.
    Hedge {
        /// Where prices/deltas/exercise decisions come from.
        #[arg(long, value_parser = ["model", "fd"], default_value = "model")]
        provider: String,
        /// Checkpoint for the model provider (default: <output_dir>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Path seed (default: config seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint against the 1-D reference: point errors,
    /// spacetime errors, and exercise-region agreement.
    Compare {
        /// Checkpoint to load (default: <output_dir>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fresh evaluation paths.
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        /// Path seed (default: config seed + 1).
        #[arg(long)]
        seed: Option<u64>,
        /// External reference price when no 1-D reduction exists.
        #[arg(long)]
        reference_price: Option<f64>,
    },
    /// Report predicted memory/time costs for the configured problem, and
    /// optionally measure small training runs across dimensions.
    Cost {
        /// Time small training runs at d = 2, 4, 8, 16 and fit the trend.
        #[arg(long)]
        measure: bool,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Validation(vec![format!("config {}: {e}", path.display())])
            })?;
            RunConfig::from_toml(&text)
                .map_err(|e| CliError::Validation(vec![format!("config {}: {e}", path.display())]))?
        }
        None => {
            let fallback = PathBuf::from("run.toml");
            if fallback.exists() {
                let text = std::fs::read_to_string(&fallback).map_err(|e| {
                    CliError::Validation(vec![format!("config run.toml: {e}")])
                })?;
                RunConfig::from_toml(&text)
                    .map_err(|e| CliError::Validation(vec![format!("config run.toml: {e}")]))?
            } else {
                RunConfig::default()
            }
        }
    };
    if let Some(out) = &cli.output {
        cfg.output_dir = out.display().to_string();
    }
    let errs = cfg.validation_errors();
    if !errs.is_empty() {
        return Err(CliError::Validation(errs));
    }
    Ok(cfg)
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(vec![format!("--threads: {e}")]))?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    if threads.is_some_and(|n| n > 1) {
        log::warn!("built without the parallel feature; --threads ignored");
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate { paths } => commands::cmd_simulate(&cfg, *paths),
        Command::Train => commands::cmd_train(&cfg),
        Command::Price {
            checkpoint,
            paths,
            seed,
        } => commands::cmd_price(&cfg, checkpoint.clone(), *paths, *seed),
        Command::Lsm => commands::cmd_lsm(&cfg),
        Command::Fd => commands::cmd_fd(&cfg),
        Command::Hedge {
            provider,
            checkpoint,
            seed,
        } => {
            let kind = match provider.as_str() {
                "fd" => HedgeProviderKind::Fd,
                _ => HedgeProviderKind::Model,
            };
            commands::cmd_hedge(&cfg, kind, checkpoint.clone(), *seed)
        }
        Command::Compare {
            checkpoint,
            paths,
            seed,
            reference_price,
        } => commands::cmd_compare(&cfg, checkpoint.clone(), *paths, *seed, *reference_price),
        Command::Cost { measure } => commands::cmd_cost(&cfg, *measure),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, messages, code) = match &err {
                CliError::Validation(msgs) => ("validation", msgs.clone(), 1u8),
                CliError::Runtime(msg) => ("runtime", vec![msg.clone()], 2u8),
            };
            for msg in &messages {
                eprintln!("error: {msg}");
            }
            if cli.error_json {
                let doc = serde_json::json!({
                    "status": "error",
                    "kind": kind,
                    "messages": messages,
                });
                println!("{doc}");
            }
            ExitCode::from(code)
        }
    }
}
