//! `latent-rom`: generate Burgers data, train latent-dynamics surrogates,
//! predict and evaluate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "latent-rom", version, about = "Latent-dynamics reduced-order models for parametric PDEs")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for sampling and network initialisation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parent directory for timestamped run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Worker threads for per-trajectory parallelism.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate training and test trajectories.
    Generate(GenerateArgs),
    /// Train one bundle per latent dimension.
    Train(TrainArgs),
    /// Predict the fields at one parameter point.
    Predict(PredictArgs),
    /// Score a bundle against a truth archive.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Parameter box preset: d1 or d2.
    #[arg(long)]
    pub domain: Option<String>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Grid segments per edge.
    #[arg(long)]
    pub segments: Option<usize>,
    /// Split training trajectories across the multiscale grids.
    #[arg(long)]
    pub multiscale: bool,
    #[arg(long)]
    pub test_segments: Option<usize>,
    /// Time steps per trajectory.
    #[arg(long)]
    pub n_steps: Option<usize>,
    #[arg(long)]
    pub t_final: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training archive directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Latent dimension(s): `5`, `2,4` or `2..7`.
    #[arg(long)]
    pub ns: Option<String>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub check_every: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model bundle directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Parameter point, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub mu: String,
    /// Query coordinates (CSV or raw f64); defaults to a uniform grid.
    #[arg(long, conflicts_with = "segments")]
    pub coords: Option<PathBuf>,
    /// Segments per edge of the uniform query grid.
    #[arg(long)]
    pub segments: Option<usize>,
    /// Also write the prediction as CSV.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model bundle directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Truth archive directory.
    #[arg(long)]
    pub data: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error:{}: {message}", commands::category(&e));
            ExitCode::FAILURE
        }
    }
}
