mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Networked dynamics from irregular, partial observations.
#[derive(Parser, Debug)]
#[command(name = "netdyn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command; each overrides the matching config key.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run config, or the built-in name `paper8`.
    #[arg(long, global = true)]
    pub config: Option<String>,
    /// Output file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset seed (and the only benchmark seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Comma-separated method names.
    #[arg(long, global = true, value_delimiter = ',')]
    pub method: Option<Vec<String>>,
    /// Comma-separated observation fractions.
    #[arg(long, global = true, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Epochs for every training stage.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub zeta: Option<f64>,
    /// Fraction of state entries deleted at each observation.
    #[arg(long, global = true)]
    pub p_miss: Option<f64>,
    /// Uniform points added to observation times on imputation grids.
    #[arg(long, global = true)]
    pub grid: Option<usize>,
    /// Parallel benchmark cells (default: NETDYN_JOBS, else 1).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset file.
    Generate {
        /// Fraction of grid points kept as observations.
        #[arg(long)]
        p_obs: Option<f64>,
        /// Limit the number of simulated trajectories.
        #[arg(long)]
        trajectories: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the graph ODE imputation model.
    TrainImpute {
        #[arg(long)]
        data: PathBuf,
        /// Loss history file (default: `<out>.history.json`).
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write dense imputations of a dataset split.
    Impute {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `train` or `test`.
        #[arg(long, default_value = "train")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train the prediction model on imputed series.
    TrainPredict {
        /// Imputed file.
        #[arg(long)]
        data: PathBuf,
        /// Imputation checkpoint the series came from.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train one comparison model.
    TrainBaseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score checkpoints against a dataset's ground truth.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint files; stage checkpoints of one method are merged.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the method x fraction x seed grid.
    Benchmark {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
