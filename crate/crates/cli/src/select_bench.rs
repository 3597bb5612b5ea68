use clap::Args;
use log::info;
use mih_localmap::seeding::derive_seed;
use mih_localmap::selection::{
    exhaustive_select, greedy_select, normalized_ratio, random_instance, SelectionConfig, EXHAUSTIVE_MAX_TABLES,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::output::{config_hash, csv_with_header, header_line, write_atomic};
use crate::{load_or_default, CliError, CommonArgs};

pub const FILE_NAME: &str = "select_bench.csv";

/// Slack below `1 - 1/e` tolerated before an instance counts as a violation.
pub const RATIO_SLACK: f64 = 1e-9;

#[derive(Debug, Args)]
pub struct SelectBenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub instances: Option<usize>,
    /// Tables per instance (at most 12).
    #[arg(long = "t")]
    pub tables: Option<usize>,
    /// Cardinality constraint.
    #[arg(long)]
    pub k: Option<usize>,
    /// Candidate matches per instance.
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub damping: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectBenchConfig {
    pub instances: usize,
    pub tables: usize,
    pub k: usize,
    pub pool: usize,
    pub damping: f64,
    pub seed: u64,
}

impl Default for SelectBenchConfig {
    fn default() -> Self {
        Self {
            instances: 200,
            tables: 8,
            k: 3,
            pool: 60,
            damping: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub instance: usize,
    pub greedy_objective: f64,
    pub optimal_objective: f64,
    pub baseline: f64,
    pub normalized_ratio: f64,
    pub greedy_tables: Vec<usize>,
    pub optimal_tables: Vec<usize>,
}

pub fn bound() -> f64 {
    1.0 - (-1.0f64).exp()
}

pub fn resolve(args: &SelectBenchArgs) -> Result<SelectBenchConfig, CliError> {
    let mut cfg: SelectBenchConfig = load_or_default(args.common.config.as_deref())?;
    cfg.instances = args.instances.unwrap_or(cfg.instances);
    cfg.tables = args.tables.unwrap_or(cfg.tables);
    cfg.k = args.k.unwrap_or(cfg.k);
    cfg.pool = args.pool.unwrap_or(cfg.pool);
    cfg.damping = args.damping.unwrap_or(cfg.damping);
    cfg.seed = args.common.seed.unwrap_or(cfg.seed);
    if cfg.tables == 0 || cfg.tables > EXHAUSTIVE_MAX_TABLES {
        return Err(CliError::Usage(format!("table count must be in 1..={EXHAUSTIVE_MAX_TABLES}")));
    }
    if cfg.k == 0 || cfg.instances == 0 {
        return Err(CliError::Usage("k and instances must be at least 1".into()));
    }
    if cfg.damping.is_nan() || cfg.damping <= 0.0 {
        return Err(CliError::Usage("damping must be positive".into()));
    }
    Ok(cfg)
}

/// Greedy and exhaustive objectives on `cfg.instances` random instances.
pub fn bench(cfg: &SelectBenchConfig) -> Vec<BenchRow> {
    let sel = SelectionConfig {
        k: cfg.k,
        d_thres: f64::INFINITY,
        damping: cfg.damping,
    };
    (0..cfg.instances)
        .into_par_iter()
        .map(|i| {
            let sets = random_instance(cfg.tables, cfg.pool, derive_seed(cfg.seed, &[i as u64]));
            let g = greedy_select(&sets, &sel);
            let (opt_tables, opt) = exhaustive_select(&sets, cfg.k, cfg.damping).expect("table count validated");
            BenchRow {
                instance: i,
                greedy_objective: g.final_objective,
                optimal_objective: opt,
                baseline: g.baseline,
                normalized_ratio: normalized_ratio(g.final_objective, opt, g.baseline),
                greedy_tables: g.selected,
                optimal_tables: opt_tables,
            }
        })
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn write_rows(rows: &[BenchRow], out: &mut Vec<u8>) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "instance",
        "greedy_objective",
        "optimal_objective",
        "baseline",
        "normalized_ratio",
        "greedy_tables",
        "optimal_tables",
    ])?;
    for r in rows {
        w.write_record([
            r.instance.to_string(),
            format!("{:.12}", r.greedy_objective),
            format!("{:.12}", r.optimal_objective),
            format!("{:.12}", r.baseline),
            format!("{:.12}", r.normalized_ratio),
            join(&r.greedy_tables),
            join(&r.optimal_tables),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: &SelectBenchArgs) -> Result<(), CliError> {
    let cfg = resolve(args)?;
    let rows = bench(&cfg);
    let header = header_line("select-bench", cfg.seed, &config_hash(&cfg));
    let bytes = csv_with_header(&header, |buf| write_rows(&rows, buf))?;
    let path = args.common.out.join(FILE_NAME);
    write_atomic(&path, &bytes)?;
    let worst = rows.iter().map(|r| r.normalized_ratio).fold(f64::INFINITY, f64::min);
    info!("wrote {}; worst normalized ratio {worst:.6}", path.display());
    let violations: Vec<usize> = rows
        .iter()
        .filter(|r| r.normalized_ratio < bound() - RATIO_SLACK)
        .map(|r| r.instance)
        .collect();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("instances {violations:?} fall below 1 - 1/e")))
    }
}
