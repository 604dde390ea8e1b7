//! `rangecast` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 runtime abort.

mod commands;
mod figures;
mod outdir;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<rangecast::Error> for CliError {
    fn from(e: rangecast::Error) -> Self {
        match e {
            rangecast::Error::Numeric { .. } => Self::runtime(e.to_string()),
            _ => Self::input(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "rangecast", version, about = "Forecast future LiDAR scans from past range images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    /// Repeat the last input frame.
    Identity,
    /// Return the ground truth (checks the evaluation pipeline).
    Oracle,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic KITTI-format sequences to `synth.dir`.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a network; checkpoints and logs go under `output.dir`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Forecast from the last M scans of a directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of `.bin` scans.
        #[arg(long)]
        input: PathBuf,
        /// Run directory; files land in its `predictions/`.
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluate on `data.test`; tables go to `reports/`, images to `figures/`.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint")]
        baseline: Option<Baseline>,
    },
    /// Print a checkpoint's manifest.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config } => commands::synth(&config),
        Command::Train { config, resume } => commands::train(&config, resume.as_deref()),
        Command::Predict {
            checkpoint,
            input,
            output,
        } => commands::predict(&checkpoint, &input, &output),
        Command::Eval {
            config,
            checkpoint,
            baseline,
        } => {
            let source = match (checkpoint, baseline) {
                (Some(path), _) => commands::EvalSource::Checkpoint(path),
                (None, Some(Baseline::Identity)) => commands::EvalSource::Identity,
                (None, Some(Baseline::Oracle)) => commands::EvalSource::Oracle,
                (None, None) => unreachable!("clap requires one of them"),
            };
            commands::eval(&config, source)
        }
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
