//! Command-line front end for the transition-calibration toolkit.
//!
//! Four subcommands cover the working cycle: `simulate` draws a migration
//! panel from a configured model, `calibrate` fits one panel with a chosen
//! method, `profile` traces a log-likelihood slice along one parameter,
//! and `study` repeats simulate-and-calibrate over many scenarios and
//! summarizes the estimates.  Plots are never rendered; every command
//! emits plot-ready delimited files plus a `manifest.toml` from which the
//! run can be reproduced exactly.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use transition_calib_core::parallel::configure_workers;

use commands::RunContext;
use config::{Config, MethodName};

const AFTER_HELP: &str = "\
Configuration sections and their defaults:
  [model]        family = \"default-only\" | \"two-factor\"
  [truth]        a, k (one per factor), pd (one per performing rating),
                 n_periods; rho and cumulative for the two-factor family;
                 renormalize = false
  [populations]  sizes, one cohort per performing rating
  [calibration]  ar_bounds = [0.01, 0.99], loading_bounds = [0.01, 2.0],
                 rho_bounds = [-0.95, 0.95]
  [pf]           particles = 1000
  [gpr]          grid_min = [0.1, 0.1], grid_max = [0.9, 0.9],
                 grid_points = [20, 20]
  [study]        n_scenarios, method (study subcommand only)

Workers default to all cores; the TRANSITION_CALIB_WORKERS environment
variable is the fallback for --workers.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.";

/// A failed run, split by exit code: configuration and usage problems
/// exit 2, numerical and runtime failures exit 3.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config file, or input data (exit 2).
    Config(String),
    /// The pipeline itself failed (exit 3).
    Run(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Run(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Run(m) => m,
        }
    }
}

/// Likelihood evaluator selector for `profile`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ProfileWay {
    /// Laplace-approximated log-likelihood.
    Laplace,
    /// Importance particle filter around the Laplace mode.
    PfIs,
    /// Bootstrap particle filter.
    PfBootstrap,
}

/// Where a profile takes its evaluation points from.
pub struct ProfilePoints {
    range: Option<String>,
    values: Option<String>,
}

impl ProfilePoints {
    /// Expand the `--range`/`--values` spec into concrete points.
    pub fn values(&self) -> Result<Vec<f64>, Failure> {
        if let Some(spec) = &self.range {
            parse_range(spec)
        } else if let Some(list) = &self.values {
            parse_values(list)
        } else {
            unreachable!("clap requires one of --range and --values")
        }
    }
}

fn parse_range(spec: &str) -> Result<Vec<f64>, Failure> {
    let bad = |detail: &str| Failure::Config(format!("--range {spec:?}: {detail}"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad("expected lo:hi:count"));
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad("lo is not a number"))?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad("hi is not a number"))?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad("count is not an integer"))?;
    if count == 0 {
        return Err(bad("the range is empty; count must be at least 1"));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    if !(hi > lo) {
        return Err(bad("hi must exceed lo"));
    }
    let step = (hi - lo) / (count - 1) as f64;
    Ok((0..count).map(|i| lo + i as f64 * step).collect())
}

fn parse_values(list: &str) -> Result<Vec<f64>, Failure> {
    let entries: Vec<&str> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if entries.is_empty() {
        return Err(Failure::Config(
            "--values needs at least one number".into(),
        ));
    }
    entries
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Failure::Config(format!("--values entry {s:?} is not a number")))
        })
        .collect()
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,

    /// RNG seed; repeating a seed reproduces the outputs byte for byte.
    #[arg(long, default_value_t = 1)]
    seed: u64,

    /// Worker threads for parallel maps (falls back to the
    /// TRANSITION_CALIB_WORKERS environment variable, then all cores).
    #[arg(long, value_name = "N")]
    workers: Option<usize>,

    /// Directory the reports and manifest are written to.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Migration panel CSV to fit.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,

    /// Calibration method.
    #[arg(long, value_enum, default_value = "laplace")]
    method: MethodName,

    /// Particle count override for pf methods [default: [pf] particles].
    #[arg(long, value_name = "N")]
    particles: Option<usize>,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("points").required(true).multiple(false)))]
struct ProfileArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Migration panel CSV to evaluate.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,

    /// Free parameter to profile (default-only: a, k; two-factor: a_d,
    /// a_p, k_d, k_p, rho); the rest stay at their [truth] values.
    #[arg(long, value_name = "NAME")]
    axis: String,

    /// Evenly spaced points as lo:hi:count.
    #[arg(long, value_name = "LO:HI:COUNT", group = "points")]
    range: Option<String>,

    /// Explicit comma-separated points.
    #[arg(long, value_name = "V1,V2,...", group = "points")]
    values: Option<String>,

    /// Likelihood evaluator.
    #[arg(long, value_enum, default_value = "laplace")]
    method: ProfileWay,

    /// Particle count override for pf methods [default: [pf] particles].
    #[arg(long, value_name = "N")]
    particles: Option<usize>,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic migration panel from the configured model.
    Simulate(SimulateArgs),
    /// Fit a migration panel with the chosen calibration method.
    Calibrate(CalibrateArgs),
    /// Trace the log-likelihood along one free parameter.
    Profile(ProfileArgs),
    /// Repeat simulate-and-calibrate and summarize the estimates.
    Study(StudyArgs),
}

#[derive(Parser)]
#[command(
    name = "transition-calib",
    version,
    about = "Calibration toolkit for latent-factor rating transition models",
    after_help = AFTER_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Resolve `--workers`, falling back to the environment variable.
fn resolve_workers(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    let value = match flag {
        Some(n) => Some(n),
        None => match std::env::var("TRANSITION_CALIB_WORKERS") {
            Ok(raw) => Some(raw.trim().parse::<usize>().map_err(|_| {
                Failure::Config(format!(
                    "TRANSITION_CALIB_WORKERS must be a positive integer, got {raw:?}"
                ))
            })?),
            Err(_) => None,
        },
    };
    if value == Some(0) {
        return Err(Failure::Config("workers must be at least 1".into()));
    }
    Ok(value)
}

/// Load the config and prepare the shared run context.
fn context<'a>(common: &'a CommonArgs, config: &'a Config) -> Result<RunContext<'a>, Failure> {
    let workers = resolve_workers(common.workers)?;
    if let Some(n) = workers {
        configure_workers(n).map_err(|e| Failure::Run(e.to_string()))?;
    }
    Ok(RunContext {
        config,
        seed: common.seed,
        workers,
        out_dir: &common.out,
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate(args) => {
            let config = Config::load(&args.common.config)?;
            let ctx = context(&args.common, &config)?;
            commands::run_simulate(&ctx)
        }
        Command::Calibrate(args) => {
            let config = Config::load(&args.common.config)?;
            let ctx = context(&args.common, &config)?;
            commands::run_calibrate(&ctx, &args.data, args.method, args.particles)
        }
        Command::Profile(args) => {
            let config = Config::load(&args.common.config)?;
            let ctx = context(&args.common, &config)?;
            let points = ProfilePoints {
                range: args.range.clone(),
                values: args.values.clone(),
            };
            commands::run_profile(&ctx, &args.data, &args.axis, &points, args.method, args.particles)
        }
        Command::Study(args) => {
            let config = Config::load(&args.common.config)?;
            let ctx = context(&args.common, &config)?;
            commands::run_study(&ctx)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}
