mod commands;
mod config;
mod error;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Common;
use crate::error::CliError;

/// Speckle contrast noise calibration.
#[derive(Debug, Parser)]
#[command(name = "scos", version)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed for synthetic data; overrides the config and spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Start calibration from zero gain and camera variance.
    #[arg(long, global = true)]
    no_priors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Reduce a frame stack to a contrast trace (`trace.csv`).
    FramesToTrace {
        stack: PathBuf,
        /// Frame rate in Hz; required unless `sampling_rate_hz` is configured.
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Calibrate noise parameters on a trace.
    Calibrate {
        trace: PathBuf,
        /// Sampling rate in Hz; inferred from the time column when omitted.
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Generate a synthetic trace with ground truth.
    Synth {
        /// Synthetic spec (JSON); defaults apply when omitted.
        spec: Option<PathBuf>,
        /// Also write the raw frame stack (`frames.bin`).
        #[arg(long)]
        frames: bool,
    },
    /// Calibrate a synthetic signal-level sweep and fit VFSI² thresholds.
    Sweep {
        spec: Option<PathBuf>,
        /// Signal levels in electrons per pixel, comma separated.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        /// Datasets per level, with consecutive seeds.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = config::load_config(cli.config.as_deref())?;
    let out = cli
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| CliError::config("no output directory: pass --out or set `output_dir`"))?;
    let common = Common {
        config,
        out,
        no_priors: cli.no_priors,
    };

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::config("--jobs must be at least 1"));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::config(e.to_string()))?;

    pool.install(|| match cli.command {
        Command::FramesToTrace { stack, rate } => commands::frames_to_trace(&common, &stack, rate),
        Command::Calibrate { trace, rate } => commands::calibrate_trace(&common, &trace, rate),
        Command::Synth { spec, frames } => commands::synth(&common, spec.as_deref(), cli.seed, frames),
        Command::Sweep { spec, levels, repeats } => {
            commands::sweep(&common, spec.as_deref(), cli.seed, levels, repeats)
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code)
        }
    }
}
