//! `spes-loc`: synthetic cohorts, preprocessing, training, tuning,
//! evaluation, channel ablation and reports.
//!
//! Exit codes: 0 success (or up to date), 1 runtime/validation error,
//! 2 usage error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const OUT_ENV: &str = "SPES_LOC_OUT";

#[derive(Parser, Debug)]
#[command(name = "spes-loc", version, about = "SOZ localisation from single-pulse stimulation responses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// output directory
    #[arg(long, env = OUT_ENV, default_value = "spes-out")]
    pub out: PathBuf,
    /// root of every random substream
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// worker threads
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// redo work even if the outputs are up to date
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic cohort with planted SOZ signal
    Synth(SynthArgs),
    /// Filter, epoch and average a cohort into response banks
    Preprocess(PreprocessArgs),
    /// Train and test every (repeat, fold) run of the chosen families
    Train(TrainArgs),
    /// Random hyperparameter search on the first run
    Tune(TuneArgs),
    /// Aggregate the run ledger into metrics and statistical tests
    Evaluate(ResultsArgs),
    /// Channel-count sensitivity of trained Transformer runs
    Ablate(AblateArgs),
    /// Summary table and plot-ready series files
    Report(ResultsArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// start from the desk-scale preset (12 × 30 at 512 Hz)
    #[arg(long)]
    pub desk: bool,
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long)]
    pub electrodes: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub soz_fraction: Option<f64>,
    #[arg(long)]
    pub sampling_rate: Option<f64>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub delayed_rate: Option<f64>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub common: Common,
    /// cohort directory (manifest.json)
    #[arg(long)]
    pub cohort: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// bank directory (bank.json) or raw cohort directory
    #[arg(long)]
    pub cohort: PathBuf,
    /// model family; repeatable; all three when absent
    #[arg(long)]
    pub family: Vec<String>,
    /// key=value config file; repeatable
    #[arg(long)]
    pub config: Vec<PathBuf>,
    #[command(flatten)]
    pub plan: PlanArgs,
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub family: Vec<String>,
    /// base configuration
    #[arg(long)]
    pub config: Vec<PathBuf>,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 10)]
    pub tune_epochs: usize,
}

#[derive(Args, Debug)]
pub struct ResultsArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub cohort: PathBuf,
    /// comma-separated channel counts
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,30")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub draws: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::dispatch(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
