//! `defmatch`: matching, evaluation, training and training-pair generation on
//! synthetic two-view scenes.
//!
//! Every command resolves a JSON run config (file, then flags on top), writes
//! the resolved config to `<out-dir>/config.json`, and exits with 0 on
//! success, 1 on numeric failure and 2 on usage or I/O errors.

mod commands;
mod config;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{eval, matching, pairgen, train};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] defmatch::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() || matches!(e, defmatch::Error::NotEnoughMatches { .. }) => 1,
            _ => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "defmatch",
    version,
    about = "Keypoint detection, description and matching on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for scenes, initialisation and RANSAC [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run config; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads for `eval` and `pairgen` [default: all cores]
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Match one image pair and draw an overlay
    Match(matching::MatchArgs),
    /// Pose AUC and homography accuracy over generated scenes
    Eval(eval::EvalArgs),
    /// Two-stage training on generated pairs
    Train(train::TrainArgs),
    /// Select generated pairs by overlap
    Pairgen(pairgen::PairgenArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Match(a) => matching::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Train(a) => train::run(&a),
        Command::Pairgen(a) => pairgen::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
