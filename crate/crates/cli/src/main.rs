//! `ghost` command line: offline layer profiling, budget allocation,
//! eviction experiments, parameter sweeps, and policy comparisons.
//!
//! Every command is deterministic given its inputs and seed (timing fields
//! aside). Errors go to stderr with a machine-parsable `error_code=` prefix
//! and a nonzero exit status. `GHOST_LOG={error,info,debug}` controls
//! diagnostic verbosity.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod errors;

use errors::CliError;

#[derive(Parser)]
#[command(name = "ghost", version, about = "Geometry-aware KV-cache eviction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute per-layer mean input-output cosine similarity from an
    /// activation trace (JSONL) and write the profile CSV.
    Profile {
        /// Activation trace: one {"layer","sample","x_b64","y_b64"} per line.
        activation_trace: PathBuf,
        /// Output profile CSV (layer,rho_bar,samples).
        out: PathBuf,
    },
    /// Allocate per-layer budgets from a profile CSV via softmax over
    /// 1 - rho_bar at temperature tau, and write the plan JSON.
    Allocate {
        /// Profile CSV produced by `profile`.
        profile: PathBuf,
        /// Output plan JSON.
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        /// Global token budget distributed across layers.
        #[arg(long)]
        total: usize,
        /// Minimum per-layer budget. Set this to the per-frame token count
        /// (1 + registers + patches) so every layer can hold the newest frame.
        #[arg(long, default_value_t = 1)]
        floor: usize,
    },
    /// Run one eviction experiment over a frame trace (JSONL) or a stream
    /// generator config (JSON) and write the report JSON.
    Run(RunArgs),
    /// Run the temperature grid or the six single-weight perturbations
    /// against the fixed seed battery.
    Sweep {
        /// Sweep config JSON (stream, profile, total, weights, seeds).
        config: PathBuf,
        #[arg(long, value_enum)]
        sweep: SweepKind,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run several policies over the identical stream and emit side-by-side
    /// coverage and plot-data CSVs.
    Compare {
        /// Stream generator config JSON.
        genconfig: PathBuf,
        /// Plan JSON shared by every policy.
        plan: PathBuf,
        /// Comma-separated policy names.
        #[arg(long, value_delimiter = ',', required = true)]
        policies: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        policy_args: PolicyArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args, Clone)]
struct PolicyArgs {
    /// Weights JSON overriding the tuned defaults.
    #[arg(long)]
    weights_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Standard)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = AblationArg::Full)]
    ablation: AblationArg,
    /// Register tokens per frame when the input is a trace (generator
    /// configs carry their own).
    #[arg(long, default_value_t = 4)]
    registers: u32,
    /// Key-similarity ranking direction.
    #[arg(long, value_enum, default_value_t = DirectionArg::RetainLeastSimilar)]
    direction: DirectionArg,
    /// Sink size in tokens for sink_recent (default: one frame).
    #[arg(long)]
    sink_size: Option<usize>,
    /// Recent-frame window for sink_recent.
    #[arg(long, default_value_t = 2)]
    window: usize,
}

#[derive(Args)]
struct RunArgs {
    /// Frame trace (JSONL) or generator config (JSON).
    input: PathBuf,
    /// Plan JSON.
    plan: PathBuf,
    /// Output report JSON.
    out: PathBuf,
    #[arg(long, default_value = "ghost")]
    policy: String,
    #[command(flatten)]
    policy_args: PolicyArgs,
    /// Overrides the generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Bytes per retained token in the modeled cache size.
    #[arg(long, default_value_t = 1)]
    bytes_per_token: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Standard,
    Strict,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AblationArg {
    Full,
    FrameOnly,
    TokenOnly,
    NoCam,
    NoGeo,
    NoTemp,
    NoBoost,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum DirectionArg {
    RetainMostSimilar,
    RetainLeastSimilar,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Tau,
    Weights,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GHOST_LOG", "error"))
        .format_timestamp(None)
        .init();

    let cli = Cli::parse();
    let result = match cli.command {
        Command::Profile {
            activation_trace,
            out,
        } => commands::profile(&activation_trace, &out),
        Command::Allocate {
            profile,
            out,
            tau,
            total,
            floor,
        } => commands::allocate(&profile, &out, tau, total, floor),
        Command::Run(args) => commands::run(&args),
        Command::Sweep {
            config,
            sweep,
            out_dir,
        } => commands::sweep(&config, sweep, &out_dir),
        Command::Compare {
            genconfig,
            plan,
            policies,
            out_dir,
            policy_args,
            seed,
        } => commands::compare(&genconfig, &plan, &policies, &out_dir, &policy_args, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error_code={} {}", err.code(), err);
            ExitCode::FAILURE
        }
    }
}
