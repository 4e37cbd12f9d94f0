//! The `labelprop` command line: corpus generation, propagation, set
//! construction, jitter, training, evaluation and trust-factor sweeps.
//!
//! Exit codes: 0 success, 1 invalid arguments, configuration or inputs,
//! 2 failure while running.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use config::{FlowConfig, JitterSection, RunConfig, SetsConfig, SweepConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    fn invalid(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "labelprop", version, about = "Propagate video labels and train with trust-weighted pseudo labels")]
pub struct Cli {
    /// TOML run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory
    #[arg(long, global = true)]
    pub overwrite: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scheme {
    Sequential,
    Rated,
    Random,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic video corpus with dense labels and exact flow
    Synth,
    /// Propagate each sequence's ground-truth labels to the following frames
    Propagate {
        /// Corpus directory containing manifest.csv and palette.csv
        #[arg(long)]
        corpus: PathBuf,
        /// Estimate missing flow files by block matching
        #[arg(long)]
        estimate_flow: bool,
    },
    /// Split propagated labelings into five training sets
    MakeSets {
        #[arg(long, value_enum)]
        scheme: Scheme,
        /// Propagated-label index (pgt.csv)
        #[arg(long)]
        index: PathBuf,
        /// Ground-truth manifest
        #[arg(long)]
        gt: PathBuf,
        /// Ratings CSV, required by the rated scheme
        #[arg(long)]
        ratings: Option<PathBuf>,
    },
    /// Write jittered copies of ground-truth labels and the AGT sets
    Jitter {
        /// Ground-truth manifest
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        palette: Option<PathBuf>,
    },
    /// Train one model on the union of the given set manifests
    Train {
        #[arg(long = "set", required = true)]
        sets: Vec<PathBuf>,
        /// Validation manifest
        #[arg(long)]
        val: PathBuf,
        /// Trust factor for propagated samples
        #[arg(long)]
        tf: Option<f64>,
        #[arg(long)]
        palette: Option<PathBuf>,
    },
    /// Score a model snapshot on a manifest
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        palette: Option<PathBuf>,
    },
    /// Train every (set, trust factor, seed) cell and tabulate mean IoU
    Sweep {
        #[arg(long = "set", required = true)]
        sets: Vec<PathBuf>,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        palette: Option<PathBuf>,
        /// Run cells concurrently
        #[arg(long)]
        parallel: bool,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    let out = cli
        .out
        .clone()
        .ok_or_else(|| CliError::Validation("--out <dir> is required".into()))?;
    commands::dispatch(cli.command, cfg, &out, cli.overwrite)
}
