mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable selecting the default output root.
pub const OUT_ROOT_VAR: &str = "REACHNET_OUT";
const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "reachnet", version, about = "Neural reachability: train, solve, verify, slice and sweep")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one value network into `<out>/<system>_<schedule>_<seed>/`.
    Train(TrainArgs),
    /// Solve the three-dimensional game on a grid and write a grid file.
    Oracle(OracleArgs),
    /// Roll out sampled states under a model's policy and report violations.
    Verify(VerifyArgs),
    /// Export two-dimensional slices of one or more models as CSV.
    Slice(SliceArgs),
    /// Train and verify every schedule and seed, merging rows into results.csv.
    Sweep(SweepArgs),
    /// Compare two models on a slice and append the metrics to a CSV.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set schedule=ssssl`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output root; defaults to $REACHNET_OUT or ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress progress lines.
    #[arg(long)]
    quiet: bool,
    /// Retrain even when a finished run with the same config exists.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct OracleArgs {
    /// Nodes per dimension.
    #[arg(long, default_value_t = reachnet::gridoracle::DEFAULT_NODES)]
    nodes: usize,
    /// Time step; the largest stable step by default.
    #[arg(long)]
    dt: Option<f64>,
    /// Spacing of stored time slices.
    #[arg(long, default_value_t = reachnet::gridoracle::DEFAULT_OUTPUT_SPACING)]
    spacing: f64,
    /// System override, e.g. `--set omega_max=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output file; defaults to `<root>/air3d_<nodes>.grid`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RolloutArgs {
    /// Number of sampled initial states.
    #[arg(long, default_value_t = reachnet::verifier::DESK_SAMPLES)]
    n: usize,
    /// Sampling seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Rollout step.
    #[arg(long, default_value_t = reachnet::verifier::DEFAULT_DT)]
    dt: f64,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Checkpoint or grid file.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    rollout: RolloutArgs,
    /// Label for the structure column; the schedule string by default.
    #[arg(long)]
    structure: Option<String>,
    /// Report CSV to write (header plus one row).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
struct SliceSpecArgs {
    /// Time-to-go of the slice; the horizon by default.
    #[arg(long)]
    tau: Option<f64>,
    /// Fixed coordinate, e.g. `--fix theta=1.5708`; others sit at the box centre.
    #[arg(long, value_name = "DIM=VALUE")]
    fix: Vec<String>,
    /// The two swept dimensions.
    #[arg(long, default_value = "x1,x2")]
    free: String,
    /// Points per swept dimension.
    #[arg(long, default_value_t = reachnet::slicer::DEFAULT_RESOLUTION)]
    resolution: usize,
}

#[derive(Debug, Args)]
struct SliceArgs {
    /// Checkpoint or grid files; one CSV each.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[command(flatten)]
    slice: SliceSpecArgs,
    /// Treat each model as a two-vehicle model and slice the union over all
    /// pairs of three vehicles.
    #[arg(long)]
    pairwise_union: bool,
    /// Output directory; defaults to `<root>/slices`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Slice the pairwise union of `a` instead of `a` itself.
    #[arg(long)]
    a_union: bool,
    /// Slice the pairwise union of `b` instead of `b` itself.
    #[arg(long)]
    b_union: bool,
    #[command(flatten)]
    slice: SliceSpecArgs,
    /// CSV the metrics row is appended to; defaults to `<root>/comparisons.csv`.
    #[arg(long)]
    results: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated activation schedules.
    #[arg(long)]
    schedules: String,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "0")]
    seeds: String,
    #[command(flatten)]
    rollout: RolloutArgs,
    /// Grid oracle; adds the slice MSE against it to every row.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Slice used for the oracle MSE.
    #[command(flatten)]
    slice: SliceSpecArgs,
    /// Runs executed at once.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Retrain runs even when a finished run with the same config exists.
    #[arg(long)]
    force: bool,
    /// Output root; defaults to $REACHNET_OUT or ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

fn out_root(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(OUT_ROOT_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Oracle(a) => commands::oracle(a),
        Command::Verify(a) => commands::verify(a),
        Command::Slice(a) => commands::slice(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Compare(a) => commands::compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
