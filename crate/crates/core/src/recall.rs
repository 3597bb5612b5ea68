//! Recall probability of multi-index hashing under uniform bit perturbation.
//!
//! A query fails only when every one of the `t` substrings carries at least
//! one perturbed bit. If each of the `ε` perturbations lands in a substring
//! uniformly and independently, failure is the probability that `ε` balls
//! cover all `t` bins, `t! S(ε, t) / t^ε` with `S` the Stirling number of the
//! second kind. Recall is one minus that.

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::descriptor::{BinaryDescriptor, PerturbationModel, PerturbationSpec, DESCRIPTOR_BITS};
use crate::mih::{MihConfig, MihIndex, PointId};
use crate::seeding::derive_seed;

/// Probability that `epsilon` uniform balls occupy all `t` bins.
///
/// Evaluated with the occupancy recurrence
/// `P[n+1][k] = P[n][k]·k/t + P[n][k-1]·(t-k+1)/t`, whose terms are all
/// non-negative. It equals the inclusion-exclusion sum
/// `Σ_j (-1)^j C(t,j) ((t-j)/t)^ε` without that sum's cancellation.
pub fn coverage_probability(t: usize, epsilon: usize) -> f64 {
    if t == 0 || epsilon < t {
        return 0.0;
    }
    let tf = t as f64;
    // occupied[k] = P(exactly k bins hit); only k <= min(n, t) is reachable
    let mut occupied = vec![0.0f64; t + 1];
    occupied[0] = 1.0;
    for n in 0..epsilon {
        let top = (n + 1).min(t);
        for k in (1..=top).rev() {
            occupied[k] = occupied[k] * (k as f64 / tf) + occupied[k - 1] * ((t - k + 1) as f64 / tf);
        }
        occupied[0] = 0.0;
    }
    occupied[t].clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecallQuery {
    pub t: usize,
    pub epsilon: usize,
    pub bits: usize,
}

impl RecallQuery {
    pub fn new(t: usize, epsilon: usize) -> Self {
        Self {
            t,
            epsilon,
            bits: DESCRIPTOR_BITS,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.t >= 1 && self.t <= self.bits && self.epsilon <= self.bits
    }
}

/// `1 - t! S(ε, t) / t^ε`.
pub fn recall_analytic(q: RecallQuery) -> f64 {
    1.0 - coverage_probability(q.t, q.epsilon)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub trials: u64,
}

impl McEstimate {
    fn from_counts(successes: u64, trials: u64) -> Self {
        let p = successes as f64 / trials as f64;
        Self {
            estimate: p,
            stderr: (p * (1.0 - p) / trials as f64).sqrt(),
            trials,
        }
    }
}

const CHUNK: u64 = 4096;

/// Monte Carlo recall estimate.
///
/// `BallsIntoBins` draws `ε` positions with replacement and checks whether
/// some substring was left untouched. `DistinctPositions` runs end to end:
/// random descriptors are stored in a real [`MihIndex`] whose buckets are
/// large enough never to evict, each is queried after flipping exactly `ε`
/// distinct bits, and a trial succeeds when the query returns its id.
///
/// Trials are split into fixed chunks with seeds derived from `seed`, so
/// the result does not depend on the worker count.
pub fn recall_monte_carlo(q: RecallQuery, model: PerturbationModel, trials: u64, seed: u64) -> McEstimate {
    assert!(q.is_valid(), "invalid recall query {q:?}");
    assert!(trials >= 1, "need at least one trial");
    let chunks = trials.div_ceil(CHUNK);
    let tag = match model {
        PerturbationModel::BallsIntoBins => 0,
        PerturbationModel::DistinctPositions => 1,
    };
    let successes: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let n = CHUNK.min(trials - c * CHUNK);
            let s = derive_seed(seed, &[tag, q.t as u64, q.epsilon as u64, c]);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            match model {
                PerturbationModel::BallsIntoBins => balls_chunk(q, n, &mut rng),
                PerturbationModel::DistinctPositions => mih_chunk(q, n, &mut rng),
            }
        })
        .sum();
    McEstimate::from_counts(successes, trials)
}

fn balls_chunk(q: RecallQuery, trials: u64, rng: &mut ChaCha8Rng) -> u64 {
    let width = DESCRIPTOR_BITS / q.t;
    let mut ok = 0;
    for _ in 0..trials {
        let mut hit = [0u64; 4];
        let mut covered = 0;
        let mut drawn = 0;
        let mut word = 0u64;
        while drawn < q.epsilon && covered < q.t {
            if drawn % 8 == 0 {
                word = rng.next_u64();
            }
            // one byte is one uniform position in 0..256
            let pos = (word & 0xff) as usize;
            word >>= 8;
            drawn += 1;
            let bin = pos / width;
            if bin < q.t && hit[bin / 64] & (1 << (bin % 64)) == 0 {
                hit[bin / 64] |= 1 << (bin % 64);
                covered += 1;
            }
        }
        if covered < q.t {
            ok += 1;
        }
    }
    ok
}

const BATCH: usize = 64;

fn mih_chunk(q: RecallQuery, trials: u64, rng: &mut ChaCha8Rng) -> u64 {
    let spec = PerturbationSpec::distinct(q.epsilon).expect("epsilon checked by is_valid");
    let mut ok = 0;
    let mut left = trials as usize;
    while left > 0 {
        let n = left.min(BATCH);
        let cfg = MihConfig::new(q.t, BATCH).expect("t checked by is_valid");
        let mut index = MihIndex::new(cfg).expect("valid config");
        let stored: Vec<_> = (0..n).map(|_| BinaryDescriptor::random_with(rng)).collect();
        for (i, d) in stored.iter().enumerate() {
            index.insert(PointId(i as u64), d);
        }
        for (i, d) in stored.iter().enumerate() {
            let probe = d.perturb_with(spec, rng);
            let r = index.query(&probe, None).expect("full table set");
            if r.union_ids.contains(&PointId(i as u64)) {
                ok += 1;
            }
        }
        left -= n;
    }
    ok
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallPoint {
    pub epsilon: usize,
    pub analytic: f64,
    pub mc: McEstimate,
}

impl RecallPoint {
    /// Whether the Monte Carlo estimate lies within `k` binomial standard
    /// errors of the analytic value. The standard error is the larger of the
    /// empirical one and the one implied by the analytic probability, so a
    /// degenerate estimate (no failures seen) is judged against the spread
    /// the model predicts.
    pub fn agrees_within(&self, k: f64) -> bool {
        let n = self.mc.trials as f64;
        let model_se = (self.analytic * (1.0 - self.analytic) / n).sqrt();
        let se = self.mc.stderr.max(model_se);
        (self.mc.estimate - self.analytic).abs() <= k * se
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallCurve {
    pub t: usize,
    pub model: PerturbationModel,
    pub points: Vec<RecallPoint>,
}

/// One curve per table count over the given perturbation levels.
pub fn sweep(
    t_values: &[usize],
    epsilons: &[usize],
    trials: u64,
    seed: u64,
    model: PerturbationModel,
) -> Vec<RecallCurve> {
    t_values
        .iter()
        .map(|&t| RecallCurve {
            t,
            model,
            points: epsilons
                .iter()
                .map(|&e| {
                    let q = RecallQuery::new(t, e);
                    RecallPoint {
                        epsilon: e,
                        analytic: recall_analytic(q),
                        mc: recall_monte_carlo(q, model, trials, seed),
                    }
                })
                .collect(),
        })
        .collect()
}

pub const SWEEP_COLUMNS: [&str; 7] = [
    "t",
    "epsilon",
    "analytic",
    "mc_estimate",
    "mc_stderr",
    "mc_trials",
    "model",
];

pub fn write_sweep_csv<W: Write>(curves: &[RecallCurve], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_COLUMNS)?;
    for c in curves {
        for p in &c.points {
            w.write_record([
                c.t.to_string(),
                p.epsilon.to_string(),
                format!("{:.12}", p.analytic),
                format!("{:.12}", p.mc.estimate),
                format!("{:.12}", p.mc.stderr),
                p.mc.trials.to_string(),
                c.model.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
