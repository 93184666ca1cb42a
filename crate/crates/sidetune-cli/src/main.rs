//! `sidetune` command line: train, eval, sweep, predict, profile.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/environment error,
//! 4 runtime error. On failure the last stderr line is
//! `<ErrorClass>: <message>` for machine parsing.

mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "sidetune",
    about = "Multimodal side-tuning document classifier",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the seed from the run config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// OCR engine binary (predict/profile).
    #[arg(long, global = true)]
    ocr_engine: Option<PathBuf>,
    /// OCR engine thread limit.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Learning-rate schedule: "printed" (rising square root, the published
    /// rule) or "inverted" (decaying variant).
    #[arg(long, global = true)]
    schedule: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a run config; writes checkpoints, history, and
    /// the run manifest.
    Train {
        /// Run configuration (flat TOML).
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split and write report tables.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run configuration naming the dataset roots.
        #[arg(long)]
        config: PathBuf,
        /// Which split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate every alpha/fc combination in a grid file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Grid file (TOML): `alphas = [[...], ...]`, `fc_widths = [0, 512, 1024]`.
        #[arg(long)]
        grid: PathBuf,
        /// Run this many sweep jobs concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Classify one document image (OCR or a supplied text file).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Pre-extracted text; skips OCR when given.
        #[arg(long)]
        text_file: Option<PathBuf>,
        /// Embedding table override (defaults to the checkpoint's source).
        #[arg(long)]
        embedding: Option<PathBuf>,
    },
    /// Time the full single-document inference pipeline.
    Profile {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        text_file: Option<PathBuf>,
        #[arg(long)]
        embedding: Option<PathBuf>,
        /// Number of timed classification runs to average.
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let schedule: Option<sidetune::train::SchedulePolicy> =
        match cli.schedule.as_deref().map(str::parse).transpose() {
            Ok(s) => s,
            Err(err) => {
                eprintln!("{}: {err}", err.class());
                return ExitCode::from(err.exit_code() as u8);
            }
        };
    let overrides = pipeline::Overrides {
        seed: cli.seed,
        out: cli.out,
        ocr_engine: cli.ocr_engine,
        threads: cli.threads,
        schedule,
    };
    let result = match cli.command {
        Command::Train { config } => pipeline::cmd_train(&config, &overrides),
        Command::Eval {
            checkpoint,
            config,
            split,
        } => pipeline::cmd_eval(&checkpoint, &config, &split, &overrides),
        Command::Sweep {
            config,
            grid,
            parallel,
        } => pipeline::cmd_sweep(&config, &grid, parallel, &overrides),
        Command::Predict {
            checkpoint,
            image,
            text_file,
            embedding,
        } => pipeline::cmd_predict(
            &checkpoint,
            &image,
            text_file.as_deref(),
            embedding.as_deref(),
            &overrides,
        ),
        Command::Profile {
            checkpoint,
            image,
            text_file,
            embedding,
            runs,
        } => pipeline::cmd_profile(
            &checkpoint,
            &image,
            text_file.as_deref(),
            embedding.as_deref(),
            runs,
            &overrides,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}: {err}", err.class());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
