//! Hash-table subset selection.
//!
//! Each table `i` recovers a subset `F_i` of the verified matches `F`. The
//! value of a table subset `S` is the damped log-determinant of the pose
//! information summed over `∪_{h∈S} F_h`. The union makes this a coverage
//! problem over a monotone submodular function, so greedy selection under a
//! cardinality constraint stays within `1 - 1/e` of the optimum (after
//! subtracting the empty-set value).

use std::io::Write;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::SelectionError;
use crate::geometry::{self, pose_info_single, CameraPose, FeatureMatch, PinholeModel, PoseInfoMatrix, DEFAULT_DAMPING};
use crate::mih::PointId;

/// Largest table count [`exhaustive_select`] accepts.
pub const EXHAUSTIVE_MAX_TABLES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Cardinality constraint.
    pub k: usize,
    /// Stop once the accumulated objective reaches this value.
    pub d_thres: f64,
    pub damping: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k: 8,
            d_thres: 80.0,
            damping: DEFAULT_DAMPING,
        }
    }
}

/// Verified matches and the subset each table recovers.
#[derive(Clone, Debug)]
pub struct TableMatchSets {
    matches: Vec<FeatureMatch>,
    info: Vec<PoseInfoMatrix>,
    per_table: Vec<Vec<usize>>,
    pose: CameraPose,
    model: PinholeModel,
}

impl TableMatchSets {
    /// `per_table[i]` lists indices into `matches`; a match shared by
    /// several tables is listed by index in each, so unions deduplicate.
    /// Matches behind the camera contribute no information.
    pub fn new(
        matches: Vec<FeatureMatch>,
        per_table: Vec<Vec<usize>>,
        pose: CameraPose,
        model: PinholeModel,
    ) -> Result<Self, SelectionError> {
        let n = matches.len();
        let mut per_table = per_table;
        for set in &mut per_table {
            set.sort_unstable();
            set.dedup();
            if let Some(&bad) = set.iter().find(|&&j| j >= n) {
                return Err(SelectionError::MatchIndex { index: bad, matches: n });
            }
        }
        let info = matches
            .iter()
            .map(|m| pose_info_single(m, &pose, &model).unwrap_or_default())
            .collect();
        Ok(Self {
            matches,
            info,
            per_table,
            pose,
            model,
        })
    }

    pub fn table_count(&self) -> usize {
        self.per_table.len()
    }

    pub fn matches(&self) -> &[FeatureMatch] {
        &self.matches
    }

    pub fn table(&self, i: usize) -> &[usize] {
        &self.per_table[i]
    }

    pub fn pose(&self) -> &CameraPose {
        &self.pose
    }

    pub fn model(&self) -> &PinholeModel {
        &self.model
    }

    fn check(&self, subset: &[usize]) -> Result<(), SelectionError> {
        match subset.iter().find(|&&i| i >= self.table_count()) {
            Some(&index) => Err(SelectionError::TableIndex {
                index,
                tables: self.table_count(),
            }),
            None => Ok(()),
        }
    }

    /// Deduplicated union of the given tables' matches.
    pub fn union(&self, subset: &[usize]) -> Result<Vec<usize>, SelectionError> {
        self.check(subset)?;
        let mut covered = vec![false; self.matches.len()];
        for &i in subset {
            for &j in &self.per_table[i] {
                covered[j] = true;
            }
        }
        Ok((0..covered.len()).filter(|&j| covered[j]).collect())
    }
}

/// Damped logDet of the information over the union of `subset`'s matches.
pub fn objective(sets: &TableMatchSets, subset: &[usize], damping: f64) -> Result<f64, SelectionError> {
    let mut sum = PoseInfoMatrix::default();
    for j in sets.union(subset)? {
        sum += &sets.info[j];
    }
    Ok(sum.logdet_damped(damping))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SelectionStep {
    pub table: usize,
    /// Objective after adding `table`.
    pub objective: f64,
    /// Increase over the previous step.
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectionResult {
    pub selected: Vec<usize>,
    pub steps: Vec<SelectionStep>,
    pub final_objective: f64,
    /// Objective of the empty selection, `6 log λ`.
    pub baseline: f64,
    pub objective_evaluations: usize,
}

impl SelectionResult {
    /// Selection of the first `k` tables, used before any matches exist.
    pub fn first_tables(k: usize, tables: usize, damping: f64) -> Self {
        Self {
            selected: (0..k.min(tables)).collect(),
            steps: Vec::new(),
            final_objective: 6.0 * damping.ln(),
            baseline: 6.0 * damping.ln(),
            objective_evaluations: 0,
        }
    }
}

/// Greedy table selection.
///
/// Each round evaluates `f(S ∪ {i})` for every unselected table that would
/// add at least one new match, and adds the best, lowest index first on
/// ties. Rounds continue while `|S| < k` and the last objective is below
/// `d_thres`, and stop early once no table adds a match.
pub fn greedy_select(sets: &TableMatchSets, config: &SelectionConfig) -> SelectionResult {
    let t = sets.table_count();
    let n = sets.matches.len();
    let damping = config.damping;
    let baseline = PoseInfoMatrix::default().logdet_damped(damping);
    let mut covered = vec![false; n];
    let mut running = PoseInfoMatrix::default();
    let mut in_s = vec![false; t];
    let mut result = SelectionResult {
        selected: Vec::new(),
        steps: Vec::new(),
        final_objective: baseline,
        baseline,
        objective_evaluations: 0,
    };
    let mut d_acc = 0.0;
    while result.selected.len() < config.k && d_acc < config.d_thres {
        let mut best: Option<(usize, f64, PoseInfoMatrix)> = None;
        for i in (0..t).filter(|&i| !in_s[i]) {
            let mut sum = running;
            let mut added = false;
            for &j in &sets.per_table[i] {
                if !covered[j] {
                    sum += &sets.info[j];
                    added = true;
                }
            }
            if !added {
                continue;
            }
            let d = sum.logdet_damped(damping);
            result.objective_evaluations += 1;
            if best.as_ref().is_none_or(|(_, bd, _)| d > *bd) {
                best = Some((i, d, sum));
            }
        }
        let Some((j, d, sum)) = best else {
            break;
        };
        for &m in &sets.per_table[j] {
            covered[m] = true;
        }
        in_s[j] = true;
        running = sum;
        result.steps.push(SelectionStep {
            table: j,
            objective: d,
            gain: d - result.final_objective,
        });
        result.selected.push(j);
        result.final_objective = d;
        d_acc = d;
    }
    result
}

/// Best subset of at most `k` tables by enumeration. Larger subsets are
/// visited first, so ties go to the largest, lexicographically first set.
pub fn exhaustive_select(sets: &TableMatchSets, k: usize, damping: f64) -> Result<(Vec<usize>, f64), SelectionError> {
    let t = sets.table_count();
    if t > EXHAUSTIVE_MAX_TABLES {
        return Err(SelectionError::TooLarge(t));
    }
    if k == 0 {
        return Err(SelectionError::Cardinality);
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for size in (0..=k.min(t)).rev() {
        for combo in combinations(t, size) {
            let v = objective(sets, &combo, damping)?;
            if best.as_ref().is_none_or(|(_, bv)| v > *bv) {
                best = Some((combo, v));
            }
        }
    }
    Ok(best.expect("the empty subset is always enumerated"))
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(cur.clone());
        let Some(i) = (0..k).rev().find(|&i| cur[i] < n - k + i) else {
            return out;
        };
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// `(greedy - baseline) / (optimum - baseline)`, 1 when the optimum adds
/// nothing over the baseline.
pub fn normalized_ratio(greedy: f64, optimum: f64, baseline: f64) -> f64 {
    let denom = optimum - baseline;
    if denom <= 0.0 {
        1.0
    } else {
        (greedy - baseline) / denom
    }
}

/// Reselects at keyframes only; between keyframes the subset is frozen.
pub fn refresh_policy(
    current: &SelectionResult,
    is_keyframe: bool,
    sets: &TableMatchSets,
    config: &SelectionConfig,
) -> SelectionResult {
    if is_keyframe {
        greedy_select(sets, config)
    } else {
        current.clone()
    }
}

/// Random selection instance: `pool` matches in front of an identity
/// camera, each table keeping every match with its own probability drawn
/// from `[0.05, 0.6)`.
pub fn random_instance(tables: usize, pool: usize, seed: u64) -> TableMatchSets {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = PinholeModel::default();
    let pose = CameraPose::identity();
    let matches: Vec<_> = (0..pool)
        .map(|j| {
            let z = rng.random_range(2.0..12.0);
            let p = Vector3::new(rng.random_range(-0.7..0.7) * z, rng.random_range(-0.5..0.5) * z, z);
            let uv = geometry::project(&pose, &model, &p).expect("point in front");
            let noise = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            FeatureMatch::new(PointId(j as u64), p, uv + noise)
        })
        .collect();
    let per_table = (0..tables)
        .map(|_| {
            let keep = rng.random_range(0.05..0.6);
            (0..pool).filter(|_| rng.random_bool(keep)).collect()
        })
        .collect();
    TableMatchSets::new(matches, per_table, pose, model).expect("indices in range")
}

/// Writes `keyframe_id, step, table_index, gain, d_acc` rows.
pub fn write_trace_csv<'a, W, I>(traces: I, out: W) -> csv::Result<()>
where
    W: Write,
    I: IntoIterator<Item = (u64, &'a SelectionResult)>,
{
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["keyframe_id", "step", "table_index", "gain", "d_acc"])?;
    for (kf, r) in traces {
        for (s, step) in r.steps.iter().enumerate() {
            w.write_record([
                kf.to_string(),
                s.to_string(),
                step.table.to_string(),
                format!("{:.9}", step.gain),
                format!("{:.9}", step.objective),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg(k: usize, d_thres: f64) -> SelectionConfig {
        SelectionConfig { k, d_thres, damping: 1e-3 }
    }

    #[test]
    fn combinations_enumerate() {
        assert_eq!(combinations(4, 2).len(), 6);
        assert_eq!(combinations(3, 0), vec![Vec::<usize>::new()]);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
        assert!(combinations(2, 3).is_empty());
    }

    #[test]
    fn objective_edges() {
        let sets = random_instance(6, 30, 1);
        let empty = objective(&sets, &[], 1e-3).unwrap();
        assert_relative_eq!(empty, 6.0 * 1e-3f64.ln(), epsilon = 1e-12);
        let all: Vec<_> = (0..6).collect();
        let full = geometry::logdet_metric(sets.matches(), sets.pose(), sets.model(), 1e-3);
        let covered = sets.union(&all).unwrap();
        if covered.len() == sets.matches().len() {
            assert_relative_eq!(objective(&sets, &all, 1e-3).unwrap(), full, epsilon = 1e-9);
        }
        assert!(objective(&sets, &[6], 1e-3).is_err());
    }

    #[test]
    fn identical_tables_give_constant_objective() {
        let base = random_instance(1, 25, 3);
        let all: Vec<usize> = (0..25).collect();
        let sets = TableMatchSets::new(base.matches().to_vec(), vec![all; 5], *base.pose(), *base.model()).unwrap();
        let v = objective(&sets, &[0], 1e-3).unwrap();
        for s in [vec![1], vec![0, 3], vec![0, 1, 2, 3, 4]] {
            assert_relative_eq!(objective(&sets, &s, 1e-3).unwrap(), v, epsilon = 1e-12);
        }
        let r = greedy_select(&sets, &cfg(8, f64::INFINITY));
        assert_eq!(r.selected, vec![0]);
    }

    #[test]
    fn exhaustion_selects_every_useful_table() {
        let sets = random_instance(6, 40, 5);
        let r = greedy_select(&sets, &cfg(10, f64::INFINITY));
        let all: Vec<_> = (0..6).collect();
        assert_relative_eq!(r.final_objective, objective(&sets, &all, 1e-3).unwrap(), epsilon = 1e-9);
        assert_eq!(sets.union(&r.selected).unwrap(), sets.union(&all).unwrap());
    }

    #[test]
    fn early_stop_on_threshold() {
        let sets = random_instance(8, 60, 7);
        let free = greedy_select(&sets, &cfg(8, f64::INFINITY));
        let thres = free.steps[1].objective - 1e-9;
        let r = greedy_select(&sets, &cfg(8, thres));
        assert_eq!(r.selected.len(), 2);
        assert!(r.final_objective >= thres);
        assert_eq!(r.selected, free.selected[..2]);
    }

    #[test]
    fn gains_diminish() {
        for seed in 0..30 {
            let r = greedy_select(&random_instance(10, 50, seed), &cfg(10, f64::INFINITY));
            for w in r.steps.windows(2) {
                assert!(w[1].gain <= w[0].gain + 1e-9, "seed {seed}: {:?}", r.steps);
            }
        }
    }

    #[test]
    fn exhaustive_trivia() {
        let one = random_instance(1, 10, 2);
        assert_eq!(exhaustive_select(&one, 3, 1e-3).unwrap().0, vec![0]);
        let sets = random_instance(5, 30, 2);
        assert_eq!(exhaustive_select(&sets, 5, 1e-3).unwrap().0, vec![0, 1, 2, 3, 4]);
        assert!(exhaustive_select(&random_instance(13, 5, 1), 2, 1e-3).is_err());
    }

    #[test]
    fn dominant_table_in_optimum() {
        let base = random_instance(1, 40, 4);
        let per_table = vec![(0..40).collect(), vec![0, 1], vec![2], vec![3, 4], vec![5]];
        let sets = TableMatchSets::new(base.matches().to_vec(), per_table, *base.pose(), *base.model()).unwrap();
        let (best, _) = exhaustive_select(&sets, 2, 1e-3).unwrap();
        assert!(best.contains(&0));
        assert_eq!(greedy_select(&sets, &cfg(2, f64::INFINITY)).selected[0], 0);
    }

    #[test]
    fn refresh_only_at_keyframes() {
        let sets = random_instance(8, 40, 9);
        let config = SelectionConfig::default();
        let current = greedy_select(&sets, &config);
        let other = random_instance(8, 40, 10);
        assert_eq!(refresh_policy(&current, false, &other, &config), current);
        assert_eq!(refresh_policy(&current, true, &sets, &config), current);

        let mut per_table: Vec<Vec<usize>> = (0..8).map(|i| sets.table(i).to_vec()).collect();
        per_table[0].clear();
        let emptied = TableMatchSets::new(sets.matches().to_vec(), per_table, *sets.pose(), *sets.model()).unwrap();
        let r = refresh_policy(&current, true, &emptied, &cfg(8, f64::INFINITY));
        assert!(!r.selected.contains(&0));
    }

    #[test]
    fn trace_rows() {
        let r = greedy_select(&random_instance(4, 20, 1), &cfg(2, f64::INFINITY));
        let mut buf = Vec::new();
        write_trace_csv([(7, &r)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + r.steps.len());
        assert!(text.lines().nth(1).unwrap().starts_with("7,0,"));
    }
}
