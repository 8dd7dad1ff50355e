//! `drmm`: train, evaluate, sample, probe and verify rendering-model networks.

use std::fmt;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod config;
mod data;
mod eval;
mod probe;
mod sample;
mod synth;
mod train;
mod verify;

/// Failure of a command, with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const EXIT_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn failed(message: impl Into<String>) -> Self {
        CliError { code: EXIT_FAILED, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<drmm::Error> for CliError {
    fn from(e: drmm::Error) -> Self {
        let code = match e {
            drmm::Error::Numeric(_) => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::config(format!("i/o error: {e}"))
    }
}

#[derive(Parser)]
#[command(name = "drmm", version, about = "Deep rendering mixture model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Semi-supervised training from a preset, a config file and flags.
    Train(train::TrainArgs),
    /// Test error and confusion matrix of a checkpoint.
    Eval(eval::EvalArgs),
    /// Draw images from the generative process.
    Sample(sample::SampleArgs),
    /// Linear decodability of latents from every layer.
    Probe(probe::ProbeArgs),
    /// Render a synthetic shapes dataset with latent sidecar.
    Synth(synth::SynthArgs),
    /// Run the built-in correctness suites.
    Verify(verify::VerifyArgs),
}

/// Where evaluation or probing data comes from when no config is given.
#[derive(Args, Clone, Debug, Default)]
pub struct DataFlags {
    /// `idx`, `cifar` or `synthetic`.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub train_images: Option<PathBuf>,
    #[arg(long)]
    pub train_labels: Option<PathBuf>,
    #[arg(long)]
    pub test_images: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    #[arg(long)]
    pub synthetic_count: Option<usize>,
    #[arg(long)]
    pub synthetic_seed: Option<u64>,
    /// Keep only the first N test items.
    #[arg(long)]
    pub n_test: Option<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Sample(a) => sample::run(a),
        Command::Probe(a) => probe::run(a),
        Command::Synth(a) => synth::run(a),
        Command::Verify(a) => verify::run(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("drmm: {e}");
            ExitCode::from(e.code)
        }
    }
}
