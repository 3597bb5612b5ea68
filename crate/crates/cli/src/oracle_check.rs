use std::collections::{BTreeMap, BTreeSet};

use clap::Args;
use log::info;
use mih_localmap::mih::{oracle_query, TableInsert};
use mih_localmap::seeding::derive_seed;
use mih_localmap::sim::{associate, Association};
use mih_localmap::{BinaryDescriptor, MihConfig, MihIndex, PerturbationSpec, PointId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::output::{config_hash, csv_with_header, header_line, write_atomic};
use crate::{load_or_default, CliError, CommonArgs};

pub const FILE_NAME: &str = "oracle_check.csv";

#[derive(Debug, Args)]
pub struct OracleCheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Randomized operations per table count.
    #[arg(long)]
    pub operations: Option<usize>,
    /// Corrupt index answers so the check must fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleCheckConfig {
    pub seed: u64,
    pub operations: usize,
    pub tables: Vec<usize>,
    pub bucket_capacity: usize,
    pub candidates: usize,
    pub observations: usize,
}

impl Default for OracleCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            operations: 10_000,
            tables: vec![4, 8, 32],
            bucket_capacity: 10,
            candidates: 1000,
            observations: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckRow {
    pub check: String,
    pub operations: usize,
    pub comparisons: usize,
    pub divergences: usize,
    pub first_divergence: String,
}

/// Straightforward bucket model keyed by the substring bits.
struct ReferenceTables {
    tables: Vec<BTreeMap<Vec<bool>, Vec<PointId>>>,
    width: usize,
    capacity: usize,
}

impl ReferenceTables {
    fn key(&self, d: &BinaryDescriptor, t: usize) -> Vec<bool> {
        (0..self.width).map(|j| d.bit(t * self.width + j)).collect()
    }

    fn insert(&mut self, id: PointId, d: &BinaryDescriptor) -> Vec<TableInsert> {
        let keys: Vec<_> = (0..self.tables.len()).map(|t| self.key(d, t)).collect();
        let cap = self.capacity;
        self.tables
            .iter_mut()
            .zip(keys)
            .map(|(table, key)| {
                let b = table.entry(key).or_default();
                if let Some(p) = b.iter().position(|&e| e == id) {
                    b.remove(p);
                    b.insert(0, id);
                    return TableInsert::MovedToFront;
                }
                b.insert(0, id);
                if b.len() > cap {
                    TableInsert::Evicted(b.pop().expect("non-empty"))
                } else {
                    TableInsert::Inserted
                }
            })
            .collect()
    }

    fn query(&self, d: &BinaryDescriptor, subset: &[usize]) -> BTreeSet<PointId> {
        subset
            .iter()
            .filter_map(|&t| self.tables[t].get(&self.key(d, t)))
            .flatten()
            .copied()
            .collect()
    }
}

fn mih_check(cfg: &OracleCheckConfig, t: usize, fault: bool) -> Result<CheckRow, CliError> {
    let mc = MihConfig::new(t, cfg.bucket_capacity).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut index = MihIndex::new(mc).expect("validated config");
    let mut reference = ReferenceTables {
        tables: vec![BTreeMap::new(); t],
        width: mc.substring_bits(),
        capacity: cfg.bucket_capacity,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, t as u64]));
    let base = BinaryDescriptor::random_with(&mut rng);
    let pool: Vec<BinaryDescriptor> = (0..300)
        .map(|_| {
            let eps = rng.random_range(0..12);
            base.perturb_with(PerturbationSpec::distinct(eps).expect("eps < 256"), &mut rng)
        })
        .collect();
    let mut row = CheckRow {
        check: format!("mih_t{t}"),
        operations: cfg.operations,
        comparisons: 0,
        divergences: 0,
        first_divergence: String::new(),
    };
    let note = |row: &mut CheckRow, op: usize, what: String| {
        if row.divergences == 0 {
            row.first_divergence = format!("op {op}: {what}");
        }
        row.divergences += 1;
    };
    for op in 0..cfg.operations {
        if rng.random_bool(0.5) {
            let i = rng.random_range(0..pool.len());
            let got = index.insert(PointId(i as u64), &pool[i]).per_table;
            let want = reference.insert(PointId(i as u64), &pool[i]);
            row.comparisons += 1;
            if got != want {
                note(&mut row, op, format!("insert {i}: index {got:?} vs reference {want:?}"));
            }
        } else {
            let q = if rng.random_bool(0.5) {
                pool[rng.random_range(0..pool.len())]
            } else {
                BinaryDescriptor::random_with(&mut rng)
            };
            let subset: Vec<usize> = (0..t).filter(|_| rng.random_bool(0.5)).collect();
            let mut got = index.query(&q, Some(&subset)).expect("subset in range").union_ids;
            if fault {
                got.pop_first();
            }
            let want = reference.query(&q, &subset);
            let scan = oracle_query(&index.dump(), &mc, &q, &subset);
            row.comparisons += 1;
            if got != want || got != scan {
                note(&mut row, op, format!("query {}: index {got:?} vs reference {want:?} vs scan {scan:?}", q.to_hex()));
            }
        }
    }
    Ok(row)
}

/// Reference association by sorting all candidates.
fn brute_associate(obs: &[BinaryDescriptor], cands: &[(PointId, BinaryDescriptor)], thr: u32, ratio: f64) -> Vec<Association> {
    obs.iter()
        .enumerate()
        .filter_map(|(oi, d)| {
            let mut all: Vec<(u32, usize)> = cands.iter().enumerate().map(|(i, (_, c))| (d.hamming(c), i)).collect();
            all.sort_unstable();
            let &(best, i) = all.first()?;
            let distinct = all.get(1).is_none_or(|&(second, _)| f64::from(best) < ratio * f64::from(second));
            (best <= thr && distinct).then(|| Association {
                observation: oi,
                point: cands[i].0,
                distance: best,
            })
        })
        .collect()
}

fn associate_check(cfg: &OracleCheckConfig, fault: bool) -> CheckRow {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2]));
    let cands: Vec<(PointId, BinaryDescriptor)> = (0..cfg.candidates)
        .map(|i| (PointId(i as u64), BinaryDescriptor::random_with(&mut rng)))
        .collect();
    let obs: Vec<BinaryDescriptor> = (0..cfg.observations)
        .map(|_| match cands.get(rng.random_range(0..cands.len().max(1))) {
            Some((_, src)) => {
                let eps = rng.random_range(0..80);
                src.perturb_with(PerturbationSpec::distinct(eps).expect("eps < 256"), &mut rng)
            }
            None => BinaryDescriptor::random_with(&mut rng),
        })
        .collect();
    let mut got = associate(&obs, &cands, 64, 0.8);
    if fault {
        got.pop();
    }
    let want = brute_associate(&obs, &cands, 64, 0.8);
    let first = got
        .iter()
        .zip(&want)
        .position(|(a, b)| a != b)
        .or((got.len() != want.len()).then(|| got.len().min(want.len())));
    CheckRow {
        check: "associate".into(),
        operations: obs.len(),
        comparisons: obs.len() * cands.len(),
        divergences: usize::from(first.is_some()),
        first_divergence: first
            .map(|i| format!("association {i}: {:?} vs {:?}", got.get(i), want.get(i)))
            .unwrap_or_default(),
    }
}

pub fn resolve(args: &OracleCheckArgs) -> Result<OracleCheckConfig, CliError> {
    let mut cfg: OracleCheckConfig = load_or_default(args.common.config.as_deref())?;
    cfg.seed = args.common.seed.unwrap_or(cfg.seed);
    cfg.operations = args.operations.unwrap_or(cfg.operations);
    if cfg.bucket_capacity == 0 || cfg.tables.is_empty() {
        return Err(CliError::Usage("need at least one table count and bucket capacity >= 1".into()));
    }
    Ok(cfg)
}

pub fn checks(cfg: &OracleCheckConfig, fault: bool) -> Result<Vec<CheckRow>, CliError> {
    let mut rows = Vec::new();
    for &t in &cfg.tables {
        rows.push(mih_check(cfg, t, fault)?);
    }
    rows.push(associate_check(cfg, fault));
    Ok(rows)
}

pub fn run(args: &OracleCheckArgs) -> Result<(), CliError> {
    let cfg = resolve(args)?;
    let rows = checks(&cfg, args.inject_fault)?;
    let header = header_line("oracle-check", cfg.seed, &config_hash(&cfg));
    let bytes = csv_with_header(&header, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["check", "operations", "comparisons", "divergences", "first_divergence"])?;
        for r in &rows {
            w.write_record([
                r.check.clone(),
                r.operations.to_string(),
                r.comparisons.to_string(),
                r.divergences.to_string(),
                r.first_divergence.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    let path = args.common.out.join(FILE_NAME);
    write_atomic(&path, &bytes)?;
    info!("wrote {}", path.display());
    match rows.iter().find(|r| r.divergences > 0) {
        Some(r) => Err(CliError::Check(format!("{} diverged at {}", r.check, r.first_divergence))),
        None => Ok(()),
    }
}
