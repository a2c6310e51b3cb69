//! `dynanet`: data generation, both training phases, baselines, sweeps,
//! grid search, inference, gradient self-check and the inference service.
//!
//! Every path is relative to `--workdir`. The configuration is read from
//! `--config` (default `dynanet.toml`, optional), then `DYNANET_SEED`, then
//! each `--set key=value`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dynanet::Error;

pub const CONFIG_FILE: &str = "dynanet.toml";
pub const SEED_ENV: &str = "DYNANET_SEED";

#[derive(Parser, Debug)]
#[command(name = "dynanet", version, about = "Dynamic-Net: one network, a continuum of objectives")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Directory all inputs and outputs live in.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Configuration file, relative to the workdir.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override, `key=value` with a TOML value. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    /// Worker threads for sweeps and grid search.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the task's training, validation and target data.
    GenData,
    /// Phase 1: train the main network under the first objective.
    TrainMain,
    /// Phase 2: freeze the main network and train the tuning-blocks.
    TrainTuning,
    /// Train conventional networks at each `fixed_lambdas` style weight and
    /// at `lambda1`, and compare against output interpolation.
    TrainFixed,
    /// Uniform α sweep over the validation set.
    Sweep,
    /// Per-block α grid search and its Pareto front.
    Grid,
    /// Run the trained network on one image.
    Infer(InferArgs),
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck(GradcheckArgs),
    /// Serve the trained model over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Validation image id, or a path to a binary PPM file.
    #[arg(long)]
    pub image: String,
    /// One α for every block, or a comma-separated value per block.
    #[arg(long, default_value = "1", allow_hyphen_values = true)]
    pub alpha: String,
    /// Output file (PPM for image tasks, CSV for the 1D task).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Seeded inputs per check.
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
    /// Only run checks whose name contains this text.
    #[arg(long)]
    pub filter: Option<String>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value_t = dynanet_server::DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

/// 0 success, 1 usage or configuration error, 2 runtime failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
