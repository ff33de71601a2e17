use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use setpose_cli::commands::{ablate, compare, eval_sets, gen_data, metrics, train};
use setpose_cli::config::{load_config, ExperimentConfig};
use setpose_cli::output::Reporter;
use setpose_cli::CliResult;

#[derive(Parser)]
#[command(
    name = "setpose",
    version,
    about = "Keypoint-based multi-object pose experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config document; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Suppress progress messages.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(Common),
    /// Train RotEst on a dataset.
    Train(Common),
    /// Compare EPnP and RotEst under injected keypoint noise.
    CompareSolvers(Common),
    /// Match prediction sets against ground truth and score them.
    EvalSets(Common),
    /// Run the keypoint and solver ablation.
    Ablate(Common),
    /// Metrics of a single pose pair.
    Metrics(Common),
}

fn run_with<C, R>(
    common: &Common,
    f: impl FnOnce(&C, &Path, &Reporter) -> CliResult<R>,
) -> CliResult<()>
where
    C: ExperimentConfig + DeserializeOwned,
{
    let cfg: C = load_config(common.config.as_deref(), common.seed)?;
    let rep = Reporter {
        quiet: common.quiet,
    };
    f(&cfg, &common.out, &rep).map(|_| ())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => run_with(c, gen_data::run),
        Command::Train(c) => run_with(c, train::run),
        Command::CompareSolvers(c) => run_with(c, compare::run),
        Command::EvalSets(c) => run_with(c, eval_sets::run),
        Command::Ablate(c) => run_with(c, ablate::run),
        Command::Metrics(c) => run_with(c, metrics::run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
