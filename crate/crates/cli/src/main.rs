use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod output;

/// Cost-sensitive crack segmentation: data synthesis, training, evaluation,
/// penalty sweeps and gradient checks.
#[derive(Parser, Debug)]
#[command(name = "crackloss", version)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of shared seeds for sweeps (overrides `seeds`).
    #[arg(long, global = true)]
    seeds: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as PGM files plus manifest.json.
    Synth {
        /// Number of pairs; defaults to train_count + test_count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train one model and write its history and checkpoint.
    Train {
        /// Training manifest; synthesized from the config when absent.
        #[arg(long, requires = "test")]
        train: Option<PathBuf>,
        /// Test manifest.
        #[arg(long, requires = "train")]
        test: Option<PathBuf>,
        /// Fill the `seconds` column (makes the CSV run-dependent).
        #[arg(long)]
        timing: bool,
    },
    /// Score probability maps against ground-truth masks (matched by file name).
    Eval {
        probs_dir: PathBuf,
        masks_dir: PathBuf,
    },
    /// Compare each beta against a Xie baseline across shared seeds.
    Sweep {
        /// Comma-separated betas (overrides `betas`).
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
    },
    /// Run every finite-difference gradient suite.
    Gradcheck {
        /// Random instances per suite.
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
