use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "isodiff", version, about = "Isometric regularization experiments for small diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// key = value configuration file; defaults apply when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. --set lambda_iso=1e-3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a score network on a toy dataset
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate path length, trajectory ratios and Jacobian spectra
    Metrics {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sample along lerp or slerp paths between random latents
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "slerp")]
        mode: String,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Invert samples to latents and regenerate them
    Invert {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV of samples, one per row; the held-out split is used when omitted
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Sphere autoencoder study
    ToyS2 {
        /// recon, iso_euclid, iso_sphere or all
        #[arg(long, default_value = "all")]
        mode: String,
        #[command(flatten)]
        common: Common,
    },
    /// Error of the probe-average trace estimator
    TraceStudy {
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        probes: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate a grid of regularizer settings
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common } => commands::train(&common),
        Command::Metrics { checkpoint, common } => commands::metrics(&checkpoint, &common),
        Command::Interpolate { checkpoint, mode, pairs, steps, common } => {
            commands::interpolate(&checkpoint, &mode, pairs, steps, &common)
        }
        Command::Invert { checkpoint, samples, steps, common } => {
            commands::invert(&checkpoint, samples.as_deref(), steps, &common)
        }
        Command::ToyS2 { mode, common } => commands::toy_s2(&mode, &common),
        Command::TraceStudy { dims, probes, trials, common } => commands::trace_study(dims, probes, trials, &common),
        Command::Sweep { common } => commands::sweep(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("isodiff: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
