//! `ddreg`: batch driver for preprocessing, pair generation, training,
//! finetuning, registration, evaluation and reporting.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Profile;

/// Exit status 1: the request itself is wrong (flags, config, incompatible inputs).
/// Exit status 2: a well-formed request failed while running.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(anyhow::Error),
}

impl From<ddreg::Error> for CliError {
    fn from(e: ddreg::Error) -> Self {
        use ddreg::Error as E;
        match e {
            E::Config(_) | E::InvalidArgument(_) | E::InvalidGrid(_) | E::Incompatible(_) => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(name = "ddreg", version, about = "Deep deformable image registration")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON config merged over the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides both the training and the augmentation seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    pub profile: Profile,
    /// Output directory.
    #[arg(long, global = true, default_value = "ddreg-out")]
    pub out: PathBuf,
    /// Overrides `train.max_epochs`.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FinetuneMode {
    Full,
    TwoStep,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Resample, crop, resize and normalise the dataset; writes a new manifest.
    Preprocess,
    /// Materialises evaluation pairs with their augmentation parameters.
    GenPairs,
    /// Trains a model from scratch.
    Train {
        /// Overrides `train.design`.
        #[arg(long)]
        design: Option<String>,
    },
    /// Continues training from a checkpoint on the configured dataset.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        mode: FinetuneMode,
        #[arg(long)]
        design: Option<String>,
    },
    /// Registers one pair; writes the warped image, its labels and the field.
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        moving_labels: Option<PathBuf>,
    },
    /// Scores a checkpoint (or the unregistered pairs) on the evaluation pairs.
    Evaluate {
        /// Without a checkpoint the initial alignment is scored.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Method name in the metrics file and report.
        #[arg(long)]
        name: Option<String>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Combines metrics files into a plain-text table and a CSV.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("DDREG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("DDREG_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = init_threads().and_then(|()| commands::run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
