use clap::Args;
use log::info;
use mih_localmap::recall::{sweep, write_sweep_csv, RecallQuery};
use mih_localmap::PerturbationModel;
use serde::{Deserialize, Serialize};

use crate::output::{config_hash, csv_with_header, header_line, write_atomic};
use crate::ranges::{parse_list, parse_range};
use crate::{load_or_default, CliError, CommonArgs};

pub const FILE_NAME: &str = "recall.csv";

/// Standard errors allowed between Monte Carlo and analytic recall.
pub const AGREEMENT_SIGMAS: f64 = 4.0;

#[derive(Debug, Args)]
pub struct RecallArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Table counts, comma separated.
    #[arg(long = "t", value_name = "LIST")]
    pub tables: Option<String>,
    /// Perturbation levels as start:end:step, end inclusive.
    #[arg(long = "eps", value_name = "RANGE")]
    pub eps: Option<String>,
    /// Monte Carlo trials per grid point.
    #[arg(long)]
    pub trials: Option<u64>,
    /// Perturbation model for the Monte Carlo column.
    #[arg(long, value_parser = parse_model)]
    pub model: Option<PerturbationModel>,
    /// Exit 1 if any grid point disagrees by more than 4 standard errors.
    #[arg(long)]
    pub self_check: bool,
}

fn parse_model(s: &str) -> Result<PerturbationModel, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| format!("unknown model `{s}` (balls_into_bins, distinct_positions)"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecallConfig {
    pub tables: Vec<usize>,
    /// Range in `start:end:step` form.
    pub eps: String,
    pub trials: u64,
    pub seed: u64,
    pub model: PerturbationModel,
}

impl Default for RecallConfig {
    fn default() -> Self {
        Self {
            tables: vec![2, 4, 8, 16, 32, 64],
            eps: "0:128:8".into(),
            trials: 100_000,
            seed: 0,
            model: PerturbationModel::BallsIntoBins,
        }
    }
}

fn resolve(args: &RecallArgs) -> Result<(RecallConfig, Vec<usize>), CliError> {
    let mut cfg: RecallConfig = load_or_default(args.common.config.as_deref())?;
    if let Some(t) = &args.tables {
        cfg.tables = parse_list(t).map_err(CliError::Usage)?;
    }
    if let Some(e) = &args.eps {
        cfg.eps.clone_from(e);
    }
    if let Some(n) = args.trials {
        cfg.trials = n;
    }
    if let Some(s) = args.common.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.model {
        cfg.model = m;
    }
    let eps = parse_range(&cfg.eps).map_err(CliError::Usage)?;
    if cfg.trials == 0 {
        return Err(CliError::Usage("trials must be at least 1".into()));
    }
    for &t in &cfg.tables {
        for &e in &eps {
            if !RecallQuery::new(t, e).is_valid() {
                return Err(CliError::Usage(format!("table count {t} with {e} flipped bits is out of range")));
            }
        }
    }
    Ok((cfg, eps))
}

pub fn run(args: &RecallArgs) -> Result<(), CliError> {
    let (cfg, eps) = resolve(args)?;
    let curves = sweep(&cfg.tables, &eps, cfg.trials, cfg.seed, cfg.model);
    let header = header_line("recall", cfg.seed, &config_hash(&cfg));
    let bytes = csv_with_header(&header, |buf| write_sweep_csv(&curves, buf))?;
    let path = args.common.out.join(FILE_NAME);
    write_atomic(&path, &bytes)?;
    info!("wrote {} ({} curves, {} points each)", path.display(), curves.len(), eps.len());
    if args.self_check {
        let bad: Vec<String> = curves
            .iter()
            .flat_map(|c| c.points.iter().map(move |p| (c.t, p)))
            .filter(|(_, p)| !p.agrees_within(AGREEMENT_SIGMAS))
            .map(|(t, p)| format!("t={t} eps={} analytic={} mc={}±{}", p.epsilon, p.analytic, p.mc.estimate, p.mc.stderr))
            .collect();
        if !bad.is_empty() {
            return Err(CliError::Check(format!("{} grid points disagree: {}", bad.len(), bad.join("; "))));
        }
        info!("self-check passed");
    }
    Ok(())
}
