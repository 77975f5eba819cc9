use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod run;
mod svg;

/// Corridor speed forecasting experiments.
#[derive(Parser, Debug)]
#[command(name = "speedcast", version, about)]
pub struct Cli {
    /// Seed for synthesis, splits, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat `key = value` file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Fresh directory for this run's outputs (created; must be empty).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for commands that train several models.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corridor and cache it.
    Synth(SynthArgs),
    /// Read daily site CSV reports into a cleaned, infilled cache.
    Ingest(IngestArgs),
    /// Train one model variant.
    Train(TrainArgs),
    /// Score a checkpoint and the baselines on one split.
    Evaluate(EvaluateArgs),
    /// Train every variant and tabulate validation errors.
    Ablate(AblateArgs),
    /// Retrain across forecast horizons.
    SweepHorizon(SweepArgs),
    /// Retrain across history windows.
    SweepWindow(SweepArgs),
    /// Inject an incident into a held-out window and compare forecasts.
    Simulate(SimulateArgs),
    /// Flow-speed scatter, space-time heatmaps and prediction traces.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub sites: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    /// Probability that a site-day loses one block of slots.
    #[arg(long)]
    pub missing_rate: Option<f64>,
    /// Sites missing more than this fraction are dropped.
    #[arg(long)]
    pub max_missing: Option<f64>,
    /// `carry-forward` or `linear` for short gaps.
    #[arg(long)]
    pub infill: Option<String>,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Daily report CSV files.
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// One site id per line, downstream first.
    #[arg(long)]
    pub site_order: Option<PathBuf>,
    #[arg(long)]
    pub max_missing: Option<f64>,
    #[arg(long)]
    pub infill: Option<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// dclstm-t, dclstm-t-conv2d, clstm-s-t, clstm-t-t, dclstm, cnn-t,
    /// speed-only or flow-only.
    #[arg(long)]
    pub variant: Option<String>,
    /// Slots ahead of the window's end (1 slot = 15 minutes).
    #[arg(long)]
    pub horizon: Option<usize>,
    /// History slots per sample.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Output channels of the three conv blocks, e.g. `32,64,128`.
    #[arg(long)]
    pub filters: Option<String>,
    #[arg(long)]
    pub lstm_units: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// train, val or test.
    #[arg(long)]
    pub split: Option<String>,
    /// `site_id,row` CSV assigning speed-flow rows (D4 or D3) per site.
    #[arg(long)]
    pub sfc_rows: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Report only the baselines.
    #[arg(long)]
    pub skip_training: bool,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Values to sweep, e.g. `1,2,3,4,5,6`.
    #[arg(long)]
    pub values: Option<String>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub threshold_mph: Option<f64>,
    #[arg(long)]
    pub spacing_km: Option<f64>,
    #[arg(long)]
    pub upstream_window: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Adds a prediction-vs-observed trace for `--site` on `--day`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Site index for the scatter and trace; all sites when omitted.
    #[arg(long)]
    pub site: Option<usize>,
    /// Day index for the heatmaps and trace.
    #[arg(long)]
    pub day: Option<usize>,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Io(PathBuf, std::io::Error),
    Core(speedcast_core::Error),
}

impl From<speedcast_core::Error> for Failure {
    fn from(e: speedcast_core::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        use speedcast_core::Error as E;
        match self {
            Failure::Usage(_) | Failure::Core(E::Config(_)) => 1,
            Failure::Core(E::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Io(p, e) => write!(f, "{}: {e}", p.display()),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli) {
        Ok(dir) => {
            println!("outputs in {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
