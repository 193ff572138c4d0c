//! Command-line front end: `run`, `baseline`, `verify` and `table`.
//!
//! Exit codes: 0 on success, 1 on runtime or verification failure, 2 on a
//! config or usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error as ThisError;

use crate::config::{parse_config, AggregationMode, ConfigError, ExperimentConfig};
use crate::error::Error;
use crate::federation::{run_experiment, Federation, RoundState};
use crate::metrics::{delta_m_clients, emit, load_final_metrics, RunResult};
use crate::verify::{self, REFERENCE_TABLES};

pub const OUT_ROOT_ENV: &str = "FEDMTL_OUT";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "fedmtl", version, about = "Federated multi-task learning with heterogeneous clients")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment and its local baseline; writes results to the output directory.
    Run(RunArgs),
    /// Run with aggregation disabled (mode forced to local).
    Baseline(RunArgs),
    /// Run the built-in oracle and property suites.
    Verify(VerifyArgs),
    /// Compare finished runs against a baseline run, or recompute the reference tables.
    Table(TableArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to `<out-root>/<mode>-seed<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = OUT_ROOT_ENV, default_value = "runs")]
    pub out_root: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's aggregation mode.
    #[arg(long)]
    pub mode: Option<AggregationMode>,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Run only this suite.
    #[arg(long)]
    pub suite: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    /// Result directory of the local baseline.
    #[arg(long, requires = "runs")]
    pub baseline: Option<PathBuf>,
    /// Result directories to compare against the baseline.
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Runtime(#[from] Error),
    #[error("verification failed in suite {suite}: {message}")]
    Verification { suite: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(Error::InvalidArgument(_)) => 2,
            CliError::Runtime(_) | CliError::Verification { .. } => 1,
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(args) => cmd_run(&args, None).map(drop),
        Command::Baseline(args) => cmd_run(&args, Some(AggregationMode::Local)).map(drop),
        Command::Verify(args) => cmd_verify(&args),
        Command::Table(args) => cmd_table(&args),
    }
}

/// Reads the config and applies the command-line overrides; flags win over
/// the file.
pub fn resolve_config(args: &RunArgs, forced_mode: Option<AggregationMode>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = parse_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = forced_mode.or(args.mode) {
        cfg.mode = mode;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn output_dir(args: &RunArgs, cfg: &ExperimentConfig) -> PathBuf {
    args.out
        .clone()
        .unwrap_or_else(|| args.out_root.join(format!("{}-seed{}", cfg.mode, cfg.seed)))
}

/// Runs the configured experiment, writes its artifacts and returns the
/// output directory. Unless the run is itself the baseline, the local
/// baseline is run with the same seed to fill in `delta_m`.
pub fn cmd_run(args: &RunArgs, forced_mode: Option<AggregationMode>) -> Result<PathBuf, CliError> {
    let cfg = resolve_config(args, forced_mode)?;
    let out = output_dir(args, &cfg);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let echo = out.join(CONFIG_ECHO_FILE);
    fs::write(&echo, cfg.to_toml()).map_err(|e| Error::io(&echo, e))?;

    let result = execute(&cfg, &out, args.resume.as_deref())?;
    emit(&result, &out)?;
    match result.delta_m {
        Some(d) => println!("{}: Δ_m = {d:+.2}% over {} rounds -> {}", cfg.mode, cfg.rounds, out.display()),
        None => println!("{}: {} rounds -> {}", cfg.mode, cfg.rounds, out.display()),
    }
    Ok(out)
}

fn execute(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> Result<RunResult, Error> {
    let fed = match resume {
        Some(path) => {
            let (state, history) = RoundState::load(path)?;
            Federation::resume(cfg.clone(), state, history)?
        }
        None => Federation::new(cfg.clone())?,
    };
    let every = cfg.checkpoint_every;
    let checkpoint = out.join(CHECKPOINT_FILE);
    let mut result = fed.run_with(|f| {
        if every > 0 && f.state().round % every == 0 {
            f.state().save(f.history(), &checkpoint)?;
        }
        Ok(())
    })?;
    let baseline = if cfg.mode == AggregationMode::Local {
        result.final_metrics.clone()
    } else {
        run_experiment(cfg.clone().with_mode(AggregationMode::Local))?.final_metrics
    };
    result.delta_m = Some(delta_m_clients(&result.final_metrics, &baseline)?);
    Ok(result)
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let reports = match &args.suite {
        Some(name) => vec![verify::run_suite(name, args.seed)?],
        None => verify::run_all(args.seed),
    };
    for r in &reports {
        match &r.failure {
            None => println!("PASS {:<12} {:>6} checks  {:.2}s", r.name, r.checks, r.secs),
            Some(msg) => println!("FAIL {:<12} {msg}", r.name),
        }
    }
    match reports.iter().find(|r| !r.passed()) {
        Some(r) => Err(CliError::Verification {
            suite: r.name.to_string(),
            message: r.failure.clone().unwrap_or_default(),
        }),
        None => Ok(()),
    }
}

pub fn cmd_table(args: &TableArgs) -> Result<(), CliError> {
    let Some(baseline) = &args.baseline else {
        for table in REFERENCE_TABLES {
            println!("{}", table.name);
            for &(method, _, reported) in table.methods {
                let got = table.delta_m_of(method)?;
                println!("  {method:<8} Δ_m = {got:+.2}%  (reported {reported:+.2}%)");
            }
        }
        return Ok(());
    };
    let local = load_final_metrics(baseline)?;
    println!("{:<40} {:>9}", "run", "Δ_m %");
    for dir in &args.runs {
        let fed = load_final_metrics(dir)?;
        println!("{:<40} {:>+9.2}", dir.display(), delta_m_clients(&fed, &local)?);
    }
    Ok(())
}
