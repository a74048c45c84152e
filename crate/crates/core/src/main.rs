//! Command-line front end: train, eval, gradcheck, sweep.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use memvir::commands::{cmd_eval, cmd_gradcheck, cmd_sweep, cmd_train, parse_axis, SweepAxis};

#[derive(Parser)]
#[command(
    name = "memvir",
    about = "Deep-metric-learning training lab with memory-based virtual classes",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train per a JSON config; writes metrics.jsonl, difficulty.csv,
    /// checkpoint.json, embeddings.csv and run.json.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a feature CSV; prints an EvalReport JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss variant plus the encoder and
    /// extended-batch pipelines; exits nonzero if any exceeds 1e-5.
    Gradcheck {
        /// Reuse a run config's loss hyper-parameters and seed.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Random instances per variant.
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Cartesian sweep over --axis NAME=V1,V2 (axes: batch_size,
    /// class_ratio, N, M, mode), one run directory per cell plus summary.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "axis")]
        axes: Vec<String>,
        /// Seeds per cell (default: the config's seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn run() -> memvir::Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Train { config } => {
            let out_dir = cmd_train(&config)?;
            println!("run artifacts in {}", out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval { checkpoint, data, out } => {
            let report = cmd_eval(&checkpoint, &data)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                std::fs::write(&path, &json)?;
            }
            println!("{json}");
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck { config, instances } => {
            let report = cmd_gradcheck(config.as_deref(), instances)?;
            print!("{}", report.table());
            if report.passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradcheck failed: {}", report.failing().join(", "));
                Ok(ExitCode::FAILURE)
            }
        }
        Cmd::Sweep { config, axes, seeds } => {
            let axes: memvir::Result<Vec<SweepAxis>> =
                axes.iter().map(|a| parse_axis(a)).collect();
            let summary = cmd_sweep(&config, &axes?, &seeds)?;
            println!("sweep summary in {}", summary.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
