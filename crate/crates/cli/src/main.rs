//! `handwash`: ingest session videos, prepare splits, train the gesture
//! classifier head, evaluate it and run smoothed per-frame prediction.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use handwash_core::error::Error as CoreError;

use crate::commands::Run;
use crate::config::{ConfigError, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "handwash", version, about = "Hand-hygiene gesture classification pipeline")]
struct Cli {
    /// Pipeline config (TOML). Built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment session videos into labeled frames and write the manifest.
    Ingest,
    /// Balance the classes and write the stratified train/validation split.
    Prepare,
    /// Fine-tune the classifier head on the training split.
    Train,
    /// Score a trained model on the validation split.
    Evaluate {
        /// Model artifact; defaults to the run's own `train/model.json`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Per-frame prediction with rolling-average smoothing.
    Predict {
        /// Model artifact; defaults to the run's own `train/model.json`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// MP4 file or frame directory.
        #[arg(long)]
        video: PathBuf,
    },
    /// Write seeded stand-in backbone weights.
    InitWeights {
        #[arg(long)]
        output: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::InitWeights { output } = &cli.command {
        return commands::init_weights(cli.seed.unwrap_or(0), output);
    }
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let run = Run::open(cfg, &cli.out_dir)?;
    log::info!("run directory {}", run.dir.display());
    match &cli.command {
        Command::Ingest => commands::ingest(&run),
        Command::Prepare => commands::prepare(&run),
        Command::Train => commands::train_cmd(&run),
        Command::Evaluate { model } => commands::evaluate(&run, model.as_deref()),
        Command::Predict { model, video } => commands::predict(&run, model.as_deref(), video),
        Command::InitWeights { .. } => unreachable!("handled above"),
    }
}

/// 1 for configuration and data validation problems, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
