use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use clap::Args;
use log::{info, warn};
use mih_localmap::mih::MihStats;
use mih_localmap::selection::write_trace_csv;
use mih_localmap::sim::{
    generate_world, run_strategies, summarize, write_metrics_csv, RunOutput, RunSummary, StrategyKind, StrategySpec,
    TrackingConfig, WorldConfig, AGE_BUCKETS,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::output::{config_hash, csv_with_header, header_line, json_bytes, write_atomic};
use crate::{load_json, CliError, CommonArgs};

pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const METRICS_DIR: &str = "metrics";
pub const TRACES_DIR: &str = "traces";

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

/// A strategy given either by name or as `{"kind": ..., "budget": ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StrategyEntry {
    Name(String),
    Spec {
        kind: String,
        #[serde(default)]
        budget: Option<usize>,
    },
}

/// Contents of the `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationFile {
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub tracking: TrackingConfig,
    pub strategies: Vec<StrategyEntry>,
    /// One run per strategy per seed; the world seed field is ignored.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for SimulationFile {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            tracking: TrackingConfig::default(),
            strategies: ["covis_only", "mih_all", "mih_selected"]
                .iter()
                .map(|s| StrategyEntry::Name((*s).into()))
                .collect(),
            seeds: default_seeds(),
        }
    }
}

/// Config after name resolution; this is what gets hashed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedSimulation {
    pub world: WorldConfig,
    pub tracking: TrackingConfig,
    pub strategies: Vec<StrategySpec>,
    pub seeds: Vec<u64>,
}

const KIND_NAMES: [&str; 5] = ["covis_only", "mih_all", "mih_selected", "rnd", "long"];

fn parse_kind(name: &str, field: &str) -> Result<StrategyKind, CliError> {
    serde_json::from_value(serde_json::Value::String(name.to_owned())).map_err(|_| {
        CliError::Config(format!(
            "field `{field}`: unknown strategy `{name}` (expected one of {})",
            KIND_NAMES.join(", ")
        ))
    })
}

impl SimulationFile {
    pub fn resolve(&self, seed_override: Option<u64>) -> Result<ResolvedSimulation, CliError> {
        let mut strategies = Vec::with_capacity(self.strategies.len());
        for (i, s) in self.strategies.iter().enumerate() {
            let spec = match s {
                StrategyEntry::Name(n) => StrategySpec::new(parse_kind(n, &format!("strategies[{i}]"))?),
                StrategyEntry::Spec { kind, budget } => StrategySpec {
                    kind: parse_kind(kind, &format!("strategies[{i}].kind"))?,
                    budget: *budget,
                },
            };
            if spec.budget == Some(0) {
                return Err(CliError::Config(format!("field `strategies[{i}].budget`: must be at least 1")));
            }
            strategies.push(spec);
        }
        if strategies.is_empty() {
            return Err(CliError::Config("field `strategies`: at least one strategy required".into()));
        }
        let seeds = seed_override.map_or_else(|| self.seeds.clone(), |s| vec![s]);
        if seeds.is_empty() {
            return Err(CliError::Config("field `seeds`: at least one seed required".into()));
        }
        self.world
            .validate()
            .map_err(|e| CliError::Config(format!("field `world`: {e}")))?;
        self.tracking
            .mih
            .validate()
            .map_err(|e| CliError::Config(format!("field `tracking.mih`: {e}")))?;
        Ok(ResolvedSimulation {
            world: self.world.clone(),
            tracking: self.tracking,
            strategies,
            seeds,
        })
    }
}

/// File-name label, e.g. `mih_selected` or `rnd_b300`.
pub fn label(spec: &StrategySpec) -> String {
    match spec.budget {
        Some(b) => format!("{}_b{b}", spec.kind),
        None => spec.kind.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub strategy: String,
    pub seed: u64,
    pub track_lost: bool,
    pub summary: RunSummary,
    pub mih_stats: Option<MihStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyAggregate {
    pub runs: usize,
    pub runs_with_track_loss: usize,
    pub mean_local_map_size: f64,
    pub mean_table_lookups: f64,
    pub mean_hamming_comparisons: f64,
    pub mean_true_match_recall: f64,
    pub mean_pose_error_trans: f64,
    pub mean_pose_error_rot: f64,
    pub match_age_histogram: [u64; AGE_BUCKETS],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub strategies: BTreeMap<String, StrategyAggregate>,
    pub runs: Vec<RunRecord>,
}

fn aggregate(hash: String, seeds: Vec<u64>, runs: Vec<RunRecord>) -> Aggregate {
    let mut strategies = BTreeMap::new();
    let mut groups: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in &runs {
        groups.entry(r.strategy.as_str()).or_default().push(r);
    }
    for (name, group) in groups {
        let n = group.len() as f64;
        let mean = |f: fn(&RunSummary) -> f64| group.iter().map(|r| f(&r.summary)).sum::<f64>() / n;
        let mut hist = [0u64; AGE_BUCKETS];
        for r in &group {
            for (h, v) in hist.iter_mut().zip(r.summary.match_age_histogram) {
                *h += v;
            }
        }
        strategies.insert(
            name.to_owned(),
            StrategyAggregate {
                runs: group.len(),
                runs_with_track_loss: group.iter().filter(|r| r.track_lost).count(),
                mean_local_map_size: mean(|s| s.local_map_size.mean),
                mean_table_lookups: mean(|s| s.table_lookups.mean),
                mean_hamming_comparisons: mean(|s| s.hamming_comparisons.mean),
                mean_true_match_recall: mean(|s| s.true_match_recall),
                mean_pose_error_trans: mean(|s| s.pose_error_trans.mean),
                mean_pose_error_rot: mean(|s| s.pose_error_rot.mean),
                match_age_histogram: hist,
            },
        );
    }
    Aggregate {
        config_hash: hash,
        seeds,
        strategies,
        runs,
    }
}

/// Runs every strategy on every seed, in parallel over seeds.
pub fn simulate(cfg: &ResolvedSimulation) -> Result<Vec<(u64, Vec<RunOutput>)>, CliError> {
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let world = generate_world(&WorldConfig {
                seed,
                ..cfg.world.clone()
            })
            .map_err(|e| CliError::Config(format!("seed {seed}: {e}")))?;
            let runs = run_strategies(&world, &cfg.strategies, &cfg.tracking)
                .map_err(|e| CliError::Config(format!("seed {seed}: {e}")))?;
            Ok((seed, runs))
        })
        .collect()
}

fn write_outputs(out: &Path, hash: &str, results: &[(u64, Vec<RunOutput>)]) -> Result<Vec<RunRecord>, CliError> {
    let mut records = Vec::new();
    for (seed, runs) in results {
        for run in runs {
            let name = label(&run.strategy);
            let header = header_line("simulate", *seed, hash);
            let metrics = csv_with_header(&header, |buf| write_metrics_csv(&run.frames, buf))?;
            write_atomic(&out.join(METRICS_DIR).join(format!("{name}_seed{seed}.csv")), &metrics)?;
            if run.strategy.kind == StrategyKind::MihSelected {
                let trace = csv_with_header(&header, |buf| {
                    write_trace_csv(run.selection_trace.iter().map(|(k, r)| (*k, r)), buf)
                })?;
                write_atomic(&out.join(TRACES_DIR).join(format!("{name}_seed{seed}.csv")), &trace)?;
            }
            let summary = summarize(&run.frames).map_err(|e| CliError::Output(e.to_string()))?;
            let track_lost = summary.track_lost_frames > 0;
            if track_lost {
                warn!("{name} seed {seed}: tracking lost on {} frames", summary.track_lost_frames);
            }
            records.push(RunRecord {
                strategy: name,
                seed: *seed,
                track_lost,
                summary,
                mih_stats: run.mih_stats,
            });
        }
    }
    Ok(records)
}

pub fn run(args: &SimulateArgs) -> Result<(), CliError> {
    let file: SimulationFile = match &args.common.config {
        Some(p) => load_json(p)?,
        None => SimulationFile::default(),
    };
    let cfg = file.resolve(args.common.seed)?;
    let hash = config_hash(&cfg);
    let started = Instant::now();
    let results = simulate(&cfg)?;
    info!(
        "{} runs in {:.2} s",
        results.iter().map(|(_, r)| r.len()).sum::<usize>(),
        started.elapsed().as_secs_f64()
    );
    let records = write_outputs(&args.common.out, &hash, &results)?;
    let agg = aggregate(hash, cfg.seeds.clone(), records);
    let path = args.common.out.join(AGGREGATE_FILE);
    write_atomic(&path, &json_bytes(&agg))?;
    info!("wrote {}", path.display());
    Ok(())
}
