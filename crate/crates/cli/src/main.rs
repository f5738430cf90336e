//! `trajgen` command-line tool.
//!
//! Exit codes: 0 success, 1 verification or training failure, 2 usage or
//! configuration error.

mod commands;
mod registry;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trajgen::Error;

#[derive(Parser)]
#[command(
    name = "trajgen",
    version,
    about = "Trajectory generation from one data record, and policy-gradient training on generated data"
)]
struct Cli {
    /// Seed for every random draw; repeated runs with one seed write identical files.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = "TRAJGEN_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Excite a plant with uniform random inputs and record (u, y).
    Collect(CollectArgs),
    /// Check the Hankel rank condition of a recorded data file.
    Certify(CertifyArgs),
    /// Generate closed-loop trajectories from recorded data alone.
    Generate(GenerateArgs),
    /// Compare generated trajectories with simulated rollouts of the plant.
    Verify(VerifyArgs),
    /// Run policy-gradient training on one experiment.
    Train(TrainArgs),
    /// Run the generation arm against the sampling arms of one experiment.
    Compare(CompareArgs),
}

#[derive(Args)]
pub struct CollectArgs {
    /// Builtin system name, system text file, or radial network CSV.
    #[arg(long)]
    pub system: String,
    /// Number of samples to record.
    #[arg(long)]
    pub length: usize,
    /// Inputs are uniform on [-scale, scale].
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Certify the record for this Hankel depth, recollecting with fresh seeds on failure.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Recollection attempts when --depth is given.
    #[arg(long, default_value_t = 5)]
    pub retries: usize,
    /// Sampling period in seconds (default: the system's own, 1 s for files).
    #[arg(long)]
    pub sample_period: Option<f64>,
    /// Output CSV (default: <out-dir>/data.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CertifyArgs {
    /// Data record CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Hankel depth T.
    #[arg(long)]
    pub depth: usize,
    /// State dimension (default: the output dimension).
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Data record CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Trajectory length T.
    #[arg(long)]
    pub depth: usize,
    /// Output-feedback window length; omit for state feedback (y = x).
    #[arg(long)]
    pub t0: Option<usize>,
    /// State dimension for the rank certificate (default: the output dimension).
    #[arg(long)]
    pub n: Option<usize>,
    /// Gain: `zero`, `random[:half width]`, or a matrix CSV file.
    #[arg(long, default_value = "zero")]
    pub theta: String,
    /// Number of trajectories.
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Standard deviation of the input perturbation.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Initial conditions: `historic` or `box[:half width]`.
    #[arg(long, default_value = "historic")]
    pub init: String,
    /// Episode index of the random streams.
    #[arg(long, default_value_t = 0)]
    pub episode: u64,
    /// Output CSV (default: <out-dir>/trajectories.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Oracle plant: builtin name, system text file, or network CSV.
    #[arg(long)]
    pub system: String,
    /// Data record CSV (default: collect a certified record from the plant).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Record length when collecting (default: the minimum for the depth).
    #[arg(long)]
    pub length: Option<usize>,
    /// Trajectory length T.
    #[arg(long)]
    pub depth: usize,
    /// Output-feedback window length (default: the plant's lag when C is not the identity).
    #[arg(long)]
    pub t0: Option<usize>,
    /// Gain: `zero`, `random[:half width]` (fresh per trial), or a matrix CSV file.
    #[arg(long, default_value = "random:0.1")]
    pub theta: String,
    /// Number of seeded draws.
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// Pass threshold on the maximum relative error.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Worst-offender dump on failure (default: <out-dir>/verify_worst.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExperimentArgs {
    /// `key = value` file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Experiment name (reactor_state, reactor_partial, voltage_state, voltage_partial).
    #[arg(long)]
    pub experiment: Option<String>,
    /// Number of episodes E.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Usable steps K per trajectory.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Gradient step size.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Extended-state window for the output-feedback experiments.
    #[arg(long)]
    pub t0: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    /// `generate` (trajectories from data) or `sample` (plant rollouts).
    #[arg(long)]
    pub mode: Option<String>,
    /// Batch size Q (default: the experiment's generation batch).
    #[arg(long)]
    pub batch: Option<usize>,
    /// Training log CSV (default: <out-dir>/train_log.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    /// Batch size of the generation arm.
    #[arg(long)]
    pub gen_batch: Option<usize>,
    /// Sampling-arm batch sizes, e.g. `10,100,full`.
    #[arg(long)]
    pub q_list: Option<String>,
}

/// Outcome of a command that ran to completion.
pub enum Status {
    Ok,
    Failed,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::MissingKey(_)
        | Error::Parse { .. }
        | Error::Io(_)
        | Error::Dimension { .. }
        | Error::Topology(_)
        | Error::WindowBelowLag { .. }
        | Error::RecordTooShort { .. }
        | Error::BlockRange { .. }
        | Error::Unobservable { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let ctx = commands::Context {
        seed: cli.seed,
        out_dir: cli.out_dir,
    };
    let result = match &cli.command {
        Command::Collect(a) => commands::collect(&ctx, a),
        Command::Certify(a) => commands::certify(&ctx, a),
        Command::Generate(a) => commands::generate(&ctx, a),
        Command::Verify(a) => commands::verify(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Compare(a) => commands::compare(&ctx, a),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
