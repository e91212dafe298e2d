//! `persona`: train, ablate, gradient-check, and alignment runs over the
//! toy personalization model.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 numeric failure, 4 gradient check failure.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Overrides the output directory when `--out` is not given.
pub const OUT_DIR_ENV: &str = "PERSONA_OUT_DIR";

#[derive(Parser)]
#[command(name = "persona", version, about = "Identity-aligned personalization of a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Experiment config (TOML).
    pub config: PathBuf,
    /// Replaces the training seed (and, for multi-seed commands, the seed list).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replaces the number of training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory. Falls back to $PERSONA_OUT_DIR, then the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// One personalization run: writes report.json and loss_curve.csv.
    Train(Common),
    /// All four conditioning modes over the evaluation seeds: writes ablation.csv.
    Ablate(Common),
    /// Finite-difference check of every trainable gradient: writes gradcheck.json.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Scales one backward rule, as `op:factor`. Test fixture only.
        #[arg(long, hide = true)]
        corrupt_backward: Option<String>,
    },
    /// Embedding alignment of the full model against naive concatenation:
    /// writes alignment.json.
    Align(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => commands::train(&c),
        Command::Ablate(c) => commands::ablate(&c),
        Command::Gradcheck {
            common,
            corrupt_backward,
        } => commands::gradcheck(&common, corrupt_backward.as_deref()),
        Command::Align(c) => commands::align(&c),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
