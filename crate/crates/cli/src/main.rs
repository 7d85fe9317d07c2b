//! `cim`: batch front end for causal influence maximization experiments.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or input error,
//! 3 enumeration guard exceeded.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "cim", version, about = "Causal influence maximization toolkit")]
struct Cli {
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true, env = "CIM_THREADS")]
    threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic instance and logged dataset from a TOML config.
    Gen(GenArgs),
    /// Fit shape-constrained response curves to a logged dataset.
    Fit(FitArgs),
    /// Select a seed set with greedy CIM or a baseline.
    Select(SelectArgs),
    /// Report welfare estimates and error terms for one seed set.
    Evaluate(EvaluateArgs),
    /// Check invariants on random enumeration-scale instances.
    Verify(VerifyArgs),
    /// Run the full pipeline over one axis of a synthetic config.
    Sweep(SweepArgs),
    /// Validate the response curves of a model file or a list of values.
    CheckShape(CheckShapeArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct GenArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct FitArgs {
    /// Logged dataset (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Node strata: a JSON array, or a model file whose strata are reused.
    #[arg(long)]
    pub strata: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// `uniform` or `ips`.
    #[arg(long, default_value = "uniform")]
    pub weighting: String,
    /// Target seed set for IPS weighting, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub target: Vec<usize>,
    /// Cap on IPS weights.
    #[arg(long)]
    pub ips_cap: Option<f64>,
    #[arg(long = "b-pos", alias = "Bpos")]
    pub b_pos: Option<usize>,
    #[arg(long = "b-neg", alias = "Bneg")]
    pub b_neg: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SelectArgs {
    /// Edge list `src dst p`.
    #[arg(long)]
    pub graph: PathBuf,
    /// Exposure spec; defaults to in-neighbourhoods.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Response model; required for `--method cim`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long = "k", short = 'K', alias = "K")]
    pub k: usize,
    #[arg(long = "r", short = 'R', alias = "R", default_value_t = 1000)]
    pub r: usize,
    /// `cim`, `degree`, `random` or `greedy_reach`.
    #[arg(long, default_value = "cim")]
    pub method: String,
    #[arg(long)]
    pub lazy: bool,
    /// Draw a fresh bank per candidate instead of per round.
    #[arg(long)]
    pub no_crn: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Include wall-clock timings in the result files.
    #[arg(long)]
    pub record_timings: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Fitted response model.
    #[arg(long)]
    pub model: PathBuf,
    /// Ground-truth model, when known.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Logged dataset for the IPS estimate.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Seed set, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "selection")]
    pub seeds: Vec<usize>,
    /// Take the seed set from a selection file.
    #[arg(long)]
    pub selection: Option<PathBuf>,
    #[arg(long = "r", short = 'R', alias = "R", default_value_t = 10000)]
    pub r: usize,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    /// Override the maximum edge probability used in the structural term.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct VerifyArgs {
    /// `reduction`, `moments`, `jensen`, `estimation`, `end2end` or `all`.
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "k", short = 'K', alias = "K", default_value_t = 2)]
    pub k: usize,
    /// `linear`, `concave` or `mixed` response curves.
    #[arg(long, default_value = "mixed")]
    pub profile: String,
    /// Inject a known defect (`convex-curve`) to exercise the failure path.
    #[arg(long)]
    pub inject_fault: Option<String>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `sigma`, `epsilon_scale`, `K` or `N`.
    #[arg(long)]
    pub axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Override `pipeline.repetitions`.
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct CheckShapeArgs {
    /// Model file to validate.
    #[arg(long, conflicts_with = "values")]
    pub model: Option<PathBuf>,
    /// Curve values, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub values: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            eprintln!("error: cannot start {t} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Fit(a) => commands::fit(a),
        Command::Select(a) => commands::select(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Verify(a) => commands::verify(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::CheckShape(a) => commands::check_shape(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
