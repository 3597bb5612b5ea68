//! Command implementations behind the `mih-localmap` binary.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage, config or I/O error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use thiserror::Error;

pub mod oracle_check;
pub mod output;
pub mod ranges;
pub mod recall_cmd;
pub mod select_bench;
pub mod simulate;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "MIH_LOCALMAP_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("writing output: {0}")]
    Output(String),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_owned(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mih-localmap", version, about = "Appearance-prior local-map experiments")]
pub struct Cli {
    /// More log output (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Analytic vs Monte Carlo recall sweep.
    Recall(recall_cmd::RecallArgs),
    /// Greedy vs exhaustive table selection on random instances.
    SelectBench(select_bench::SelectBenchArgs),
    /// Tracking simulation over strategies and seeds.
    Simulate(simulate::SimulateArgs),
    /// Randomized equivalence checks against brute-force oracles.
    OracleCheck(oracle_check::OracleCheckArgs),
}

/// Flags shared by every command.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON config file; flags given on the command line take precedence.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// Root seed override.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
}

/// Parses a JSON config, naming the offending field on failure.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        CliError::Config(format!("{}: field `{}`: {}", path.display(), field, e.inner()))
    })
}

/// Config from `--config` if given, defaults otherwise.
pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    path.map_or_else(|| Ok(T::default()), load_json)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Recall(a) => recall_cmd::run(&a),
        Command::SelectBench(a) => select_bench::run(&a),
        Command::Simulate(a) => simulate::run(&a),
        Command::OracleCheck(a) => oracle_check::run(&a),
    }
}

/// Sizes the global worker pool from [`THREADS_ENV`] when set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}
