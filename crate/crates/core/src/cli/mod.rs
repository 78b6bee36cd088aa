//! Command-line front end. Every subcommand writes into `--out` with fixed
//! file names:
//!
//! | subcommand        | files                                              |
//! |-------------------|----------------------------------------------------|
//! | `synth`           | `topology.csv`, `traffic.csv`, `truth.csv`         |
//! | `convert`         | `traffic.csv`                                      |
//! | `predict`         | `predictions.csv`, `predictor.model`, `gaps.txt`   |
//! | `cluster`         | `labels.csv`, `gmm.model`, `loglik.csv`            |
//! | `deploy`          | `plan.txt`, `deploy_summary.csv`, `gaps.txt`       |
//! | `compare-access`  | `access_compare.csv`, `access_compare.svg`, `gaps.txt` |
//! | `compare-schemes` | `schemes_compare.csv`, `schemes_compare.svg`, `gaps.txt` |
//! | `pipeline`        | all of `predict`, `cluster`, `deploy`, `compare-schemes` |

mod commands;
pub mod svg;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::access::Scheme;
use crate::data::DEFAULT_BASELINE_BYTES;
use crate::error::Result;

pub use commands::{parse_bandwidth_grid, read_labels};

#[derive(Debug, Parser)]
#[command(name = "skyplan", version, about = "Plan power-minimal UAV base-station deployments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic scenario (topology + traffic).
    Synth(SynthArgs),
    /// Bin raw `bs_id,timestamp,bytes` records into hourly traffic.
    Convert(ConvertArgs),
    /// Train the hourly predictors and forecast the next day.
    Predict(PredictArgs),
    /// Partition stations into aerial cells with KEG.
    Cluster(ClusterArgs),
    /// Place one UAV per cell and compute transmit power.
    Deploy(DeployArgs),
    /// Total power of RSMA, FDMA and TDMA over a bandwidth grid.
    CompareAccess(CompareAccessArgs),
    /// Clustering and placement baselines side by side.
    CompareSchemes(CompareSchemesArgs),
    /// predict, cluster, deploy and compare-schemes on the forecast day.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct TopologyArgs {
    /// `bs_id,lon,lat` CSV.
    #[arg(long)]
    pub topology: PathBuf,
    /// Keep only stations inside `lon1,lat1,lon2,lat2`.
    #[arg(long)]
    pub bounds: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct TrafficArgs {
    /// `bs_id,day,hour,bytes` CSV.
    #[arg(long)]
    pub traffic: PathBuf,
    /// Bytes added to every station-hour.
    #[arg(long, default_value_t = DEFAULT_BASELINE_BYTES)]
    pub baseline: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SlotArgs {
    /// Day of the traffic file to plan for (default: last day).
    #[arg(long)]
    pub day: Option<usize>,
    /// Hour 1..=24 to plan for (default: busiest hour of the day).
    #[arg(long)]
    pub hour: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterOpts {
    /// Number of aerial cells requested.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Stop EM once the log-likelihood moves less than this.
    #[arg(long, default_value_t = crate::clustering::DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = crate::clustering::DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    /// Re-seed empty K-means clusters instead of dropping them.
    #[arg(long)]
    pub reseed_empty: bool,
    /// Independent KEG starts; the best log-likelihood is kept.
    #[arg(long, default_value_t = crate::clustering::DEFAULT_RESTARTS)]
    pub restarts: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long, default_value_t = 200)]
    pub stations: usize,
    /// Mixture components the stations are drawn from.
    #[arg(long, default_value_t = 8)]
    pub components: usize,
    #[arg(long, default_value_t = 8)]
    pub days: usize,
    /// Relative hourly noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ConvertArgs {
    /// `bs_id,timestamp,bytes` CSV, timestamps in seconds.
    #[arg(long)]
    pub raw: PathBuf,
    /// Timestamp of day 1, hour 1.
    #[arg(long)]
    pub start_ts: i64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub traffic: TrafficArgs,
    /// Days of history to use, from day 1. 0 means all.
    #[arg(long, default_value_t = 6)]
    pub history_days: usize,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.3)]
    pub learning_rate: f64,
    /// Hidden layer widths, comma separated.
    #[arg(long, default_value = "20,10")]
    pub hidden: String,
    /// Train one network per station and hour.
    #[arg(long)]
    pub per_station: bool,
    /// Use Rprop on epoch gradients instead of per-sample descent.
    #[arg(long)]
    pub rprop: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub topology: TopologyArgs,
    #[command(flatten)]
    pub cluster: ClusterOpts,
    /// Traffic CSV for the optional traffic feature column.
    #[arg(long)]
    pub traffic: Option<PathBuf>,
    /// Append the chosen day's per-station traffic as a feature with this weight.
    #[arg(long)]
    pub traffic_feature: Option<f64>,
    #[command(flatten)]
    pub slot: SlotArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DeployArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub topology: TopologyArgs,
    #[command(flatten)]
    pub traffic: TrafficArgs,
    #[command(flatten)]
    pub slot: SlotArgs,
    #[command(flatten)]
    pub cluster: ClusterOpts,
    /// `bs_id,cluster` CSV; clusters are computed with KEG when absent.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Radio parameter file (`key = value`).
    #[arg(long)]
    pub radio: Option<PathBuf>,
    #[arg(long, default_value = "rsma")]
    pub scheme: Scheme,
    /// Also report every access scheme at the chosen positions.
    #[arg(long)]
    pub all_schemes: bool,
    /// Place UAVs at the unweighted station mean.
    #[arg(long)]
    pub mean_positions: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CompareAccessArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub topology: TopologyArgs,
    #[command(flatten)]
    pub traffic: TrafficArgs,
    #[command(flatten)]
    pub slot: SlotArgs,
    #[command(flatten)]
    pub cluster: ClusterOpts,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub radio: Option<PathBuf>,
    /// `lo:hi:steps` in Hz, evenly spaced.
    #[arg(long, default_value = "500000:2000000:7")]
    pub bandwidth_grid: String,
}

#[derive(Debug, Clone, Args)]
pub struct CompareSchemesArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub topology: TopologyArgs,
    #[command(flatten)]
    pub traffic: TrafficArgs,
    #[command(flatten)]
    pub slot: SlotArgs,
    #[command(flatten)]
    pub cluster: ClusterOpts,
    #[arg(long)]
    pub radio: Option<PathBuf>,
    #[arg(long, default_value = "rsma")]
    pub scheme: Scheme,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub topology: TopologyArgs,
    #[command(flatten)]
    pub traffic: TrafficArgs,
    #[command(flatten)]
    pub cluster: ClusterOpts,
    #[arg(long)]
    pub radio: Option<PathBuf>,
    #[arg(long, default_value = "rsma")]
    pub scheme: Scheme,
    /// Forecast hour to plan for (default: busiest forecast hour).
    #[arg(long)]
    pub hour: Option<usize>,
    #[arg(long, default_value_t = 6)]
    pub history_days: usize,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Convert(a) => commands::convert(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Cluster(a) => commands::cluster(&a),
        Command::Deploy(a) => commands::deploy(&a),
        Command::CompareAccess(a) => commands::compare_access(&a),
        Command::CompareSchemes(a) => commands::compare_schemes(&a),
        Command::Pipeline(a) => commands::pipeline(&a),
    }
}

/// Parses `args` (program name first), runs, and returns the process exit
/// code: 0 on success, 1 for domain or validation failures and usage
/// errors, 2 for I/O failures.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
