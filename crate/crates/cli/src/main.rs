//! `stillbox`: dataset generation, training, evaluation, inference and the
//! classical baseline from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Depth from translating-camera image pairs.
#[derive(Debug, Parser)]
#[command(name = "stillbox", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a random-scene dataset.
    Generate {
        #[arg(long)]
        scenes: usize,
        #[arg(long, value_parser = parse_size)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of scenes held out for testing.
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
    },
    /// Train a network from scratch.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "mini")]
        config: String,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train through increasing resolutions, one dataset per stage.
    Finetune {
        #[arg(long, value_delimiter = ',', required = true)]
        schedule: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        data: Vec<PathBuf>,
        /// Epochs per stage; a single value applies to every stage.
        #[arg(long, value_delimiter = ',', default_value = "20")]
        epochs: Vec<usize>,
        #[arg(long, default_value = "mini")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a checkpoint on both splits of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Evaluation pairs per scene.
        #[arg(long, default_value_t = 4)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Multi-shift depth for the newest frame of a directory of frames.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of `frame_*.png`, oldest first by name.
        #[arg(long)]
        frames: PathBuf,
        /// Camera speed, m/s.
        #[arg(long)]
        speed: f64,
        #[arg(long, value_delimiter = ',', default_value = "1,3")]
        shifts: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        #[arg(long, default_value_t = 9.0)]
        v0: f64,
        #[arg(long, default_value_t = 50.0)]
        e0: f64,
    },
    /// Block matching + FOE + per-pixel depth on every scene of a split.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 3)]
        shift: usize,
        /// Score at most this many scenes.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Self-checks.
    Check {
        /// Finite-difference check of every operator and the mini network.
        #[arg(long)]
        gradients: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 8)]
    samples_per_scene: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Training log; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v @ (32 | 64 | 128)) => Ok(v),
        _ => Err(format!("size must be 32, 64 or 128, got `{s}`")),
    }
}

/// Exit status classes.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or inputs that do not satisfy a precondition.
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
