//! Synthetic tracking world and the end-to-end local-map pipeline.
//!
//! A camera flies a waypoint path through a box of random 3D points, each
//! carrying a random descriptor. Every frame observes up to `m` visible
//! points with pixel noise, a noisy depth reading and a perturbed
//! descriptor. Tracking associates observations against a local map chosen
//! by one of several strategies, refines the pose with Gauss-Newton, and at
//! keyframes (every `K` frames) grows the map, the co-visibility graph and
//! the hash index.
//!
//! Ground-truth point ids ride along with observations for scoring only. New
//! map points are back-projected from the estimated pose and measured depth,
//! and nothing the tracker decides depends on the truth fields.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covisibility::{local_map, CovisibilityGraph, KeyframeRecord, MapPointRecord};
use crate::descriptor::{BinaryDescriptor, PerturbationModel, PerturbationSpec};
use crate::error::SimError;
use crate::geometry::{gauss_newton_refine, CameraPose, FeatureMatch, PinholeModel};
use crate::mih::{MihConfig, MihIndex, PointId};
use crate::seeding::derive_seed;
use crate::selection::{greedy_select, SelectionConfig, SelectionResult, TableMatchSets};

const WORLD_STREAM: u64 = 1;
const OBSERVE_STREAM: u64 = 2;
const RND_STREAM: u64 = 3;

/// Match-age histogram buckets, each one keyframe interval wide; the last
/// bucket collects everything older.
pub const AGE_BUCKETS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub point_count: usize,
    /// Points fill the cube `[-h, h]^3`.
    pub world_half_extent: f64,
    /// Camera positions; the path visits them in order.
    pub waypoints: Vec<[f64; 3]>,
    pub frames_per_segment: usize,
    /// Every camera looks at this point; when absent cameras face the
    /// direction of travel.
    pub look_at: Option<[f64; 3]>,
    pub camera: PinholeModel,
    /// Full opening angle of the visibility cone.
    pub fov_deg: f64,
    pub depth_range: [f64; 2],
    pub pixel_noise_sigma: f64,
    /// Relative standard deviation of measured depth.
    pub depth_noise: f64,
    /// Per-observation bit flips drawn uniformly from this inclusive range.
    pub epsilon_range: [usize; 2],
    pub perturbation_model: PerturbationModel,
    pub features_per_frame: usize,
    pub keyframe_interval: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let waypoints = (0..=8)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / 8.0;
                let z = if i % 2 == 0 { 0.5 } else { -0.5 };
                [6.0 * a.cos(), 6.0 * a.sin(), z]
            })
            .collect();
        Self {
            point_count: 2000,
            world_half_extent: 10.0,
            waypoints,
            frames_per_segment: 20,
            look_at: Some([0.0, 0.0, 0.0]),
            camera: PinholeModel::default(),
            fov_deg: 90.0,
            depth_range: [0.5, 15.0],
            pixel_noise_sigma: 1.0,
            depth_noise: 0.01,
            epsilon_range: [0, 50],
            perturbation_model: PerturbationModel::DistinctPositions,
            features_per_frame: 200,
            keyframe_interval: 5,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_owned()));
        if self.point_count < self.features_per_frame {
            return bad("point_count must be at least features_per_frame");
        }
        if self.keyframe_interval == 0 {
            return bad("keyframe_interval must be at least 1");
        }
        if self.waypoints.len() < 2 || self.frames_per_segment == 0 {
            return bad("trajectory needs two waypoints and frames_per_segment >= 1");
        }
        if !self.camera.is_valid() {
            return bad("camera focal lengths must be positive");
        }
        if self.epsilon_range[0] > self.epsilon_range[1] || self.epsilon_range[1] > 256 {
            return bad("epsilon_range must be ordered and within 0..=256");
        }
        if !(self.depth_range[0] > 0.0 && self.depth_range[0] < self.depth_range[1]) {
            return bad("depth_range must be positive and ordered");
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.waypoints.len() - 1) * self.frames_per_segment + 1
    }

    pub fn is_keyframe(&self, frame: usize) -> bool {
        frame.is_multiple_of(self.keyframe_interval)
    }
}

#[derive(Clone, Debug)]
pub struct WorldPoint {
    pub position: Vector3<f64>,
    pub descriptor: BinaryDescriptor,
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub points: Vec<WorldPoint>,
    pub poses: Vec<CameraPose>,
}

impl World {
    /// Indices of points visible from frame `frame`, ascending.
    pub fn visible(&self, frame: usize) -> Vec<usize> {
        let cfg = &self.config;
        let pose = &self.poses[frame];
        let cos_half = (cfg.fov_deg.to_radians() / 2.0).cos();
        self.points
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                let pc = pose.transform(&p.position);
                if pc.z < cfg.depth_range[0] || pc.z > cfg.depth_range[1] {
                    return false;
                }
                if cfg.fov_deg <= 0.0 || pc.z / pc.norm() < cos_half {
                    return false;
                }
                cfg.camera.project_camera(&pc).is_ok_and(|uv| cfg.camera.in_image(&uv))
            })
            .map(|(i, _)| i)
            .collect()
    }
}

fn trajectory(cfg: &WorldConfig) -> Vec<CameraPose> {
    let up = Vector3::new(0.0, 0.0, 1.0);
    let target = |eye: Vector3<f64>, heading: Vector3<f64>| match cfg.look_at {
        Some(t) => Vector3::from(t),
        None => eye + heading,
    };
    let mut poses = Vec::with_capacity(cfg.frame_count());
    let mut heading = Vector3::x();
    for seg in cfg.waypoints.windows(2) {
        let (a, b) = (Vector3::from(seg[0]), Vector3::from(seg[1]));
        heading = b - a;
        for s in 0..cfg.frames_per_segment {
            let eye = a + (b - a) * (s as f64 / cfg.frames_per_segment as f64);
            poses.push(CameraPose::look_at(eye, target(eye, heading), up));
        }
    }
    let last = Vector3::from(*cfg.waypoints.last().expect("validated"));
    poses.push(CameraPose::look_at(last, target(last, heading), up));
    poses
}

/// Builds the world, failing if any frame sees fewer than `m` points.
pub fn generate_world(cfg: &WorldConfig) -> Result<World, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[WORLD_STREAM]));
    let h = cfg.world_half_extent;
    let points = (0..cfg.point_count)
        .map(|_| WorldPoint {
            position: Vector3::new(rng.random_range(-h..h), rng.random_range(-h..h), rng.random_range(-h..h)),
            descriptor: BinaryDescriptor::random_with(&mut rng),
        })
        .collect();
    let world = World {
        config: cfg.clone(),
        points,
        poses: trajectory(cfg),
    };
    for f in 0..world.poses.len() {
        let visible = world.visible(f).len();
        if visible < cfg.features_per_frame {
            return Err(SimError::Infeasible {
                frame: f,
                visible,
                required: cfg.features_per_frame,
            });
        }
    }
    Ok(world)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub measurement: Vector2<f64>,
    pub depth: f64,
    pub descriptor: BinaryDescriptor,
    /// Scoring only.
    pub truth: usize,
}

/// Up to `m` visible points of `frame`, in ascending ground-truth order.
pub fn observe(world: &World, frame: usize) -> Vec<Observation> {
    let cfg = &world.config;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[OBSERVE_STREAM, frame as u64]));
    let visible = world.visible(frame);
    let mut chosen: Vec<usize> = if visible.len() > cfg.features_per_frame {
        rand::seq::index::sample(&mut rng, visible.len(), cfg.features_per_frame)
            .into_iter()
            .map(|i| visible[i])
            .collect()
    } else {
        visible
    };
    chosen.sort_unstable();
    let pose = &world.poses[frame];
    let (w, h) = cfg.camera.image_size();
    chosen
        .into_iter()
        .map(|i| {
            let p = &world.points[i];
            let pc = pose.transform(&p.position);
            let uv = cfg.camera.project_camera(&pc).expect("visible points are in front");
            let nx: f64 = StandardNormal.sample(&mut rng);
            let ny: f64 = StandardNormal.sample(&mut rng);
            let nd: f64 = StandardNormal.sample(&mut rng);
            let noisy = uv + Vector2::new(nx, ny) * cfg.pixel_noise_sigma;
            let measurement = Vector2::new(noisy.x.clamp(0.0, w - 1e-9), noisy.y.clamp(0.0, h - 1e-9));
            let eps = rng.random_range(cfg.epsilon_range[0]..=cfg.epsilon_range[1]);
            let spec = PerturbationSpec {
                epsilon: eps,
                model: cfg.perturbation_model,
            };
            Observation {
                measurement,
                depth: pc.z * (1.0 + cfg.depth_noise * nd),
                descriptor: p.descriptor.perturb_with(spec, &mut rng),
                truth: i,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Association {
    pub observation: usize,
    pub point: PointId,
    pub distance: u32,
}

/// Nearest candidate in Hamming distance for each observation, kept when
/// within `threshold` and clearly better than the runner-up
/// (`best < ratio · second`). Candidates are scanned in the given order and
/// the first of equally distant ones wins.
pub fn associate(
    observations: &[BinaryDescriptor],
    candidates: &[(PointId, BinaryDescriptor)],
    threshold: u32,
    ratio: f64,
) -> Vec<Association> {
    let mut out = Vec::new();
    for (oi, d) in observations.iter().enumerate() {
        let mut best: Option<(PointId, u32)> = None;
        let mut second = u32::MAX;
        for (id, c) in candidates {
            let dist = d.hamming(c);
            match best {
                Some((_, b)) if dist >= b => second = second.min(dist),
                Some((_, b)) => {
                    second = b;
                    best = Some((*id, dist));
                }
                None => best = Some((*id, dist)),
            }
        }
        if let Some((id, dist)) = best {
            let distinct = second == u32::MAX || (dist as f64) < ratio * second as f64;
            if dist <= threshold && distinct {
                out.push(Association {
                    observation: oi,
                    point: id,
                    distance: dist,
                });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Every co-visible point.
    CovisOnly,
    /// Co-visible points retrieved from all hash tables.
    MihAll,
    /// Co-visible points retrieved from the greedily selected tables.
    MihSelected,
    /// Random subset of the co-visible points.
    Rnd,
    /// Co-visible points with the longest track history.
    Long,
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyKind::CovisOnly => "covis_only",
            StrategyKind::MihAll => "mih_all",
            StrategyKind::MihSelected => "mih_selected",
            StrategyKind::Rnd => "rnd",
            StrategyKind::Long => "long",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    /// Fixed candidate budget for `rnd` / `long`. When absent they follow a
    /// trailing moving average of the `mih_selected` local-map size.
    #[serde(default)]
    pub budget: Option<usize>,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind) -> Self {
        Self { kind, budget: None }
    }

    fn needs_budget(&self) -> bool {
        matches!(self.kind, StrategyKind::Rnd | StrategyKind::Long)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    pub mih: MihConfig,
    pub selection: SelectionConfig,
    pub hamming_threshold: u32,
    pub ratio: f64,
    pub min_shared: usize,
    pub track_loss_threshold: usize,
    pub gn_max_iters: usize,
    pub gn_tol: f64,
    /// Reprojection χ² gate (2 dof) for inliers.
    pub chi2_gate: f64,
    /// Window of the moving-average budget for `rnd` / `long`.
    pub budget_window: usize,
    /// Record true-match statistics. Never affects tracking.
    pub score_truth: bool,
    /// For `mih_selected`, also query every table on the same index state
    /// and record the resulting local-map size. Those lookups are left out
    /// of `table_lookups`.
    pub audit_full_index: bool,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            mih: MihConfig::default(),
            selection: SelectionConfig::default(),
            hamming_threshold: 64,
            ratio: 0.8,
            min_shared: 1,
            track_loss_threshold: 10,
            gn_max_iters: 10,
            gn_tol: 1e-9,
            chi2_gate: 5.991,
            budget_window: 10,
            score_truth: true,
            audit_full_index: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub frame_index: usize,
    pub is_keyframe: bool,
    pub covisible_size: usize,
    /// `|{P_h}|`, zero for strategies that do not query the index.
    pub appearance_size: usize,
    pub local_map_size: usize,
    /// All-table local-map size on the same state; see
    /// [`TrackingConfig::audit_full_index`]. Zero when not audited.
    pub full_index_local_map_size: usize,
    /// Lookups on the tracking path.
    pub table_lookups: u64,
    /// Lookups done at keyframes to gather selection input.
    pub mapping_table_lookups: u64,
    pub hamming_comparisons: u64,
    pub objective_evaluations: u64,
    pub selected_tables: usize,
    pub matches: usize,
    pub inliers: usize,
    pub true_matches_found: usize,
    pub true_matches_available: usize,
    pub pose_error_rot: f64,
    pub pose_error_trans: f64,
    pub track_lost: bool,
    /// Matches whose map point is older than one keyframe interval.
    pub long_baseline_matches: usize,
    pub match_age_histogram: [u64; AGE_BUCKETS],
}

struct MapPoint {
    record: MapPointRecord,
    truth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub strategy: StrategySpec,
    pub seed: u64,
    pub frames: Vec<FrameMetrics>,
    pub poses: Vec<CameraPose>,
    /// `(keyframe_id, selection)` for each reselection.
    pub selection_trace: Vec<(u64, SelectionResult)>,
    pub mih_stats: Option<crate::mih::MihStats>,
}

fn constant_velocity(poses: &[CameraPose]) -> CameraPose {
    match poses {
        [] => CameraPose::identity(),
        [p] => *p,
        [.., a, b] => {
            // b · (a⁻¹ · b)
            let rel_r = a.rotation.transpose() * b.rotation;
            let rel_t = a.rotation.transpose() * (b.translation - a.translation);
            let r = b.rotation * rel_r;
            let r = nalgebra::Rotation3::from_matrix(&r).into_inner();
            CameraPose {
                rotation: r,
                translation: b.rotation * rel_t + b.translation,
            }
        }
    }
}

/// Trailing moving average of a local-map size series, at least 1.
pub fn moving_average_budget(sizes: &[usize], window: usize) -> Vec<usize> {
    let w = window.max(1);
    (0..sizes.len())
        .map(|f| {
            let lo = (f + 1).saturating_sub(w);
            let s = &sizes[lo..=f];
            let mean = s.iter().sum::<usize>() as f64 / s.len() as f64;
            (mean.round() as usize).max(1)
        })
        .collect()
}

struct Tracker<'a> {
    world: &'a World,
    cfg: &'a TrackingConfig,
    strategy: StrategySpec,
    budgets: Option<&'a [usize]>,
    map: Vec<MapPoint>,
    mapped_truth: Vec<bool>,
    graph: CovisibilityGraph,
    index: MihIndex,
    selection: SelectionResult,
    reference: u64,
    next_keyframe: u64,
    poses: Vec<CameraPose>,
    trace: Vec<(u64, SelectionResult)>,
}

impl<'a> Tracker<'a> {
    fn uses_index(&self) -> bool {
        matches!(self.strategy.kind, StrategyKind::MihAll | StrategyKind::MihSelected)
    }

    fn budget(&self, frame: usize) -> usize {
        match (self.strategy.budget, self.budgets) {
            (Some(b), _) => b,
            (None, Some(series)) => series[frame.min(series.len() - 1)],
            (None, None) => unreachable!("budget resolved before the run"),
        }
    }

    fn candidates(&self, ids: &BTreeSet<PointId>) -> Vec<(PointId, BinaryDescriptor)> {
        ids.iter()
            .map(|&id| (id, self.map[id.0 as usize].record.descriptor))
            .collect()
    }

    fn add_points(&mut self, frame: usize, pose: &CameraPose, obs: &[&Observation]) -> Vec<PointId> {
        let model = &self.world.config.camera;
        let cam_to_world_r = pose.rotation.transpose();
        obs.iter()
            .map(|o| {
                let pc = model.unproject(&o.measurement, o.depth);
                let position = cam_to_world_r * (pc - pose.translation);
                let id = PointId(self.map.len() as u64);
                self.map.push(MapPoint {
                    record: MapPointRecord {
                        point_id: id,
                        position,
                        descriptor: o.descriptor,
                        first_seen_frame: frame as u64,
                        observation_count: 1,
                    },
                    truth: o.truth,
                });
                self.mapped_truth[o.truth] = true;
                id
            })
            .collect()
    }

    fn insert_keyframe(&mut self, frame: usize, observed: BTreeSet<PointId>) -> Result<(), SimError> {
        let id = self.next_keyframe;
        self.next_keyframe += 1;
        self.graph.add_keyframe(KeyframeRecord {
            keyframe_id: id,
            frame_index: frame as u64,
            observed_point_ids: observed.clone(),
        })?;
        self.reference = id;
        if self.uses_index() {
            let pc = self.graph.covisible_set(id, self.cfg.min_shared)?;
            // older co-visible points first so the keyframe's own end up in front
            for p in pc.iter().filter(|p| !observed.contains(p)).chain(observed.iter()) {
                let d = self.map[p.0 as usize].record.descriptor;
                self.index.insert(*p, &d);
            }
        }
        Ok(())
    }

    fn matches_for(&self, obs: &[Observation], assoc: &[Association]) -> Vec<FeatureMatch> {
        let sigma = self.world.config.pixel_noise_sigma.max(1e-9);
        assoc
            .iter()
            .map(|a| {
                let mp = &self.map[a.point.0 as usize];
                FeatureMatch::with_sigma(a.point, mp.record.position, obs[a.observation].measurement, sigma)
            })
            .collect()
    }

    /// Refines from `predicted`; returns the pose, inlier flags, and whether
    /// tracking was lost.
    fn estimate(&self, predicted: &CameraPose, matches: &[FeatureMatch]) -> (CameraPose, Vec<bool>, bool) {
        let model = &self.world.config.camera;
        let lost = (predicted.to_owned(), vec![false; matches.len()], true);
        if matches.len() < self.cfg.track_loss_threshold {
            return lost;
        }
        let Ok(first) = gauss_newton_refine(predicted, model, matches, self.cfg.gn_max_iters, self.cfg.gn_tol) else {
            return lost;
        };
        let inlier: Vec<bool> = matches
            .iter()
            .map(|m| m.chi2(&first.pose, model).is_ok_and(|c| c <= self.cfg.chi2_gate))
            .collect();
        let kept: Vec<FeatureMatch> = matches.iter().zip(&inlier).filter(|(_, &k)| k).map(|(m, _)| *m).collect();
        if kept.len() < self.cfg.track_loss_threshold {
            return lost;
        }
        match gauss_newton_refine(&first.pose, model, &kept, self.cfg.gn_max_iters, self.cfg.gn_tol) {
            Ok(second) => {
                let inlier = matches
                    .iter()
                    .map(|m| m.chi2(&second.pose, model).is_ok_and(|c| c <= self.cfg.chi2_gate))
                    .collect();
                (second.pose, inlier, false)
            }
            Err(_) => (first.pose, inlier, false),
        }
    }

    /// Full-table association at a keyframe, used only to feed selection.
    fn reselect(&mut self, obs: &[Observation], descs: &[BinaryDescriptor], pc: &BTreeSet<PointId>, pose: &CameraPose, keyframe: u64) -> Result<(u64, u64), SimError> {
        let full = self.index.batch_query(descs, None)?;
        let lookups = (descs.len() * self.index.table_count()) as u64;
        let local = local_map(&full.aggregated, pc);
        let assoc = associate(descs, &self.candidates(&local), self.cfg.hamming_threshold, self.cfg.ratio);
        let model = &self.world.config.camera;
        let all = self.matches_for(obs, &assoc);
        let mut matches = Vec::new();
        let mut per_table = vec![Vec::new(); self.index.table_count()];
        for (a, m) in assoc.iter().zip(all) {
            if !m.chi2(pose, model).is_ok_and(|c| c <= self.cfg.chi2_gate) {
                continue;
            }
            let j = matches.len();
            matches.push(m);
            for (t, ids) in full.results[a.observation].per_table_ids.iter().enumerate() {
                if ids.contains(&a.point) {
                    per_table[t].push(j);
                }
            }
        }
        let sets = TableMatchSets::new(matches, per_table, *pose, *model)?;
        let result = greedy_select(&sets, &self.cfg.selection);
        let evals = result.objective_evaluations as u64;
        if !result.selected.is_empty() {
            self.selection = result.clone();
        }
        self.trace.push((keyframe, result));
        Ok((lookups, evals))
    }

    fn frame(&mut self, f: usize) -> Result<FrameMetrics, SimError> {
        let world = self.world;
        let wc = &world.config;
        let obs = observe(world, f);
        let descs: Vec<BinaryDescriptor> = obs.iter().map(|o| o.descriptor).collect();
        let is_keyframe = wc.is_keyframe(f);
        let available = if self.cfg.score_truth {
            obs.iter().filter(|o| self.mapped_truth[o.truth]).count()
        } else {
            0
        };
        let mut m = FrameMetrics {
            frame_index: f,
            is_keyframe,
            covisible_size: 0,
            appearance_size: 0,
            local_map_size: 0,
            full_index_local_map_size: 0,
            table_lookups: 0,
            mapping_table_lookups: 0,
            hamming_comparisons: 0,
            objective_evaluations: 0,
            selected_tables: 0,
            matches: 0,
            inliers: 0,
            true_matches_found: 0,
            true_matches_available: available,
            pose_error_rot: 0.0,
            pose_error_trans: 0.0,
            track_lost: false,
            long_baseline_matches: 0,
            match_age_histogram: [0; AGE_BUCKETS],
        };

        if f == 0 {
            let pose = world.poses[0];
            let all: Vec<&Observation> = obs.iter().collect();
            let ids = self.add_points(0, &pose, &all);
            self.insert_keyframe(0, ids.into_iter().collect())?;
            self.poses.push(pose);
            m.selected_tables = self.selection.selected.len();
            return Ok(m);
        }

        let predicted = constant_velocity(&self.poses);
        let pc = self.graph.covisible_set(self.reference, self.cfg.min_shared)?;
        m.covisible_size = pc.len();
        let local: BTreeSet<PointId> = match self.strategy.kind {
            StrategyKind::CovisOnly => pc.clone(),
            StrategyKind::MihAll | StrategyKind::MihSelected => {
                let subset = match self.strategy.kind {
                    StrategyKind::MihSelected => Some(self.selection.selected.as_slice()),
                    _ => None,
                };
                let q = self.index.batch_query(&descs, subset)?;
                let tables = subset.map_or(self.index.table_count(), <[usize]>::len);
                m.table_lookups = (descs.len() * tables) as u64;
                m.selected_tables = tables;
                m.appearance_size = q.aggregated.len();
                let local = local_map(&q.aggregated, &pc);
                if subset.is_none() {
                    m.full_index_local_map_size = local.len();
                } else if self.cfg.audit_full_index {
                    let full = self.index.batch_query(&descs, None)?;
                    m.full_index_local_map_size = local_map(&full.aggregated, &pc).len();
                }
                local
            }
            StrategyKind::Rnd => {
                let budget = self.budget(f);
                if pc.len() <= budget {
                    pc.clone()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(wc.seed, &[RND_STREAM, f as u64]));
                    let all: Vec<PointId> = pc.iter().copied().collect();
                    rand::seq::index::sample(&mut rng, all.len(), budget)
                        .into_iter()
                        .map(|i| all[i])
                        .collect()
                }
            }
            StrategyKind::Long => {
                let budget = self.budget(f);
                let mut by_age: Vec<(u64, PointId)> = pc
                    .iter()
                    .map(|&id| {
                        let len = self.map[id.0 as usize].record.track_length(f as u64).unwrap_or(0);
                        (len, id)
                    })
                    .collect();
                by_age.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
                by_age.into_iter().take(budget).map(|(_, id)| id).collect()
            }
        };
        m.local_map_size = local.len();
        m.hamming_comparisons = (descs.len() * local.len()) as u64;

        let assoc = associate(&descs, &self.candidates(&local), self.cfg.hamming_threshold, self.cfg.ratio);
        m.matches = assoc.len();
        let matches = self.matches_for(&obs, &assoc);
        let (pose, inlier, lost) = self.estimate(&predicted, &matches);
        m.track_lost = lost;
        m.inliers = inlier.iter().filter(|&&k| k).count();
        m.pose_error_rot = pose.rotation_error(&world.poses[f]);
        m.pose_error_trans = pose.translation_error(&world.poses[f]);
        for a in &assoc {
            let mp = &self.map[a.point.0 as usize];
            let age = mp.record.track_length(f as u64).unwrap_or(0) as usize;
            m.match_age_histogram[(age / wc.keyframe_interval).min(AGE_BUCKETS - 1)] += 1;
            if age > wc.keyframe_interval {
                m.long_baseline_matches += 1;
            }
            if self.cfg.score_truth && mp.truth == obs[a.observation].truth {
                m.true_matches_found += 1;
            }
        }
        self.poses.push(pose);

        if is_keyframe {
            if self.strategy.kind == StrategyKind::MihSelected && !lost {
                let (lookups, evals) = self.reselect(&obs, &descs, &pc, &pose, self.next_keyframe)?;
                m.mapping_table_lookups = lookups;
                m.objective_evaluations = evals;
            }
            let mut observed = BTreeSet::new();
            let mut matched_obs = vec![false; obs.len()];
            for (a, &k) in assoc.iter().zip(&inlier) {
                if k {
                    observed.insert(a.point);
                    matched_obs[a.observation] = true;
                    self.map[a.point.0 as usize].record.observation_count += 1;
                }
            }
            let fresh: Vec<&Observation> = obs.iter().zip(&matched_obs).filter(|(_, &mo)| !mo).map(|(o, _)| o).collect();
            observed.extend(self.add_points(f, &pose, &fresh));
            self.insert_keyframe(f, observed)?;
        }
        Ok(m)
    }
}

/// Runs one strategy over the whole trajectory.
///
/// `budgets` gives per-frame candidate budgets for `rnd` / `long` specs
/// without a fixed budget.
pub fn run_pipeline(
    world: &World,
    strategy: StrategySpec,
    cfg: &TrackingConfig,
    budgets: Option<&[usize]>,
) -> Result<RunOutput, SimError> {
    cfg.mih.validate()?;
    if strategy.needs_budget() {
        match (strategy.budget, budgets) {
            (Some(0), _) => return Err(SimError::Config("budget must be at least 1".into())),
            (None, None) | (None, Some([])) => {
                return Err(SimError::Config(format!("{} needs a budget", strategy.kind)));
            }
            _ => {}
        }
    }
    let mut tracker = Tracker {
        world,
        cfg,
        strategy,
        budgets,
        map: Vec::new(),
        mapped_truth: vec![false; world.points.len()],
        graph: CovisibilityGraph::new(),
        index: MihIndex::new(cfg.mih)?,
        selection: SelectionResult::first_tables(cfg.selection.k, cfg.mih.table_count, cfg.selection.damping),
        reference: 0,
        next_keyframe: 0,
        poses: Vec::new(),
        trace: Vec::new(),
    };
    let frames = (0..world.poses.len())
        .map(|f| tracker.frame(f))
        .collect::<Result<Vec<_>, _>>()?;
    let mih_stats = tracker.uses_index().then(|| tracker.index.stats());
    Ok(RunOutput {
        strategy,
        seed: world.config.seed,
        frames,
        poses: tracker.poses,
        selection_trace: tracker.trace,
        mih_stats,
    })
}

/// Runs several strategies on one world. Budget-following `rnd` / `long`
/// runs take their budgets from a `mih_selected` run, which is performed
/// even if not listed.
pub fn run_strategies(world: &World, strategies: &[StrategySpec], cfg: &TrackingConfig) -> Result<Vec<RunOutput>, SimError> {
    let selected_spec = StrategySpec::new(StrategyKind::MihSelected);
    let needs_ref = strategies.iter().any(|s| s.needs_budget() && s.budget.is_none());
    let reference = if needs_ref {
        Some(run_pipeline(world, selected_spec, cfg, None)?)
    } else {
        None
    };
    let budgets = reference.as_ref().map(|r| {
        let sizes: Vec<usize> = r.frames.iter().map(|m| m.local_map_size).collect();
        moving_average_budget(&sizes, cfg.budget_window)
    });
    strategies
        .iter()
        .map(|s| match (&reference, s.kind, s.budget) {
            (Some(r), StrategyKind::MihSelected, _) => Ok(r.clone()),
            _ => run_pipeline(world, *s, cfg, budgets.as_deref()),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SeriesStats {
    pub mean: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Nearest-rank quantile, `p` in (0, 1].
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn series_stats(values: &[f64]) -> Result<SeriesStats, SimError> {
    if values.is_empty() {
        return Err(SimError::EmptySeries);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(SeriesStats {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        q1: nearest_rank(&sorted, 0.25),
        q3: nearest_rank(&sorted, 0.75),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub frames: usize,
    pub track_lost_frames: usize,
    pub local_map_size: SeriesStats,
    pub covisible_size: SeriesStats,
    pub table_lookups: SeriesStats,
    pub hamming_comparisons: SeriesStats,
    pub matches: SeriesStats,
    pub pose_error_trans: SeriesStats,
    pub pose_error_rot: SeriesStats,
    /// `Σ found / Σ available` over the run.
    pub true_match_recall: f64,
    pub match_age_histogram: [u64; AGE_BUCKETS],
    pub long_baseline_matches: u64,
    pub mapping_table_lookups: u64,
    pub objective_evaluations: u64,
}

pub fn summarize(metrics: &[FrameMetrics]) -> Result<RunSummary, SimError> {
    if metrics.is_empty() {
        return Err(SimError::EmptySeries);
    }
    let col = |f: fn(&FrameMetrics) -> f64| -> Result<SeriesStats, SimError> {
        series_stats(&metrics.iter().map(f).collect::<Vec<_>>())
    };
    let found: usize = metrics.iter().map(|m| m.true_matches_found).sum();
    let available: usize = metrics.iter().map(|m| m.true_matches_available).sum();
    let mut hist = [0u64; AGE_BUCKETS];
    for m in metrics {
        for (h, v) in hist.iter_mut().zip(m.match_age_histogram) {
            *h += v;
        }
    }
    Ok(RunSummary {
        frames: metrics.len(),
        track_lost_frames: metrics.iter().filter(|m| m.track_lost).count(),
        local_map_size: col(|m| m.local_map_size as f64)?,
        covisible_size: col(|m| m.covisible_size as f64)?,
        table_lookups: col(|m| m.table_lookups as f64)?,
        hamming_comparisons: col(|m| m.hamming_comparisons as f64)?,
        matches: col(|m| m.matches as f64)?,
        pose_error_trans: col(|m| m.pose_error_trans)?,
        pose_error_rot: col(|m| m.pose_error_rot)?,
        true_match_recall: if available == 0 { 0.0 } else { found as f64 / available as f64 },
        match_age_histogram: hist,
        long_baseline_matches: metrics.iter().map(|m| m.long_baseline_matches as u64).sum(),
        mapping_table_lookups: metrics.iter().map(|m| m.mapping_table_lookups).sum(),
        objective_evaluations: metrics.iter().map(|m| m.objective_evaluations).sum(),
    })
}

pub fn metrics_columns() -> Vec<String> {
    let mut cols: Vec<String> = [
        "frame_index",
        "is_keyframe",
        "covisible_size",
        "appearance_size",
        "local_map_size",
        "full_index_local_map_size",
        "table_lookups",
        "mapping_table_lookups",
        "hamming_comparisons",
        "objective_evaluations",
        "selected_tables",
        "matches",
        "inliers",
        "true_matches_found",
        "true_matches_available",
        "pose_error_rot",
        "pose_error_trans",
        "track_lost",
        "long_baseline_matches",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend((0..AGE_BUCKETS).map(|b| format!("age_b{b}")));
    cols
}

pub fn write_metrics_csv<W: Write>(metrics: &[FrameMetrics], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(metrics_columns())?;
    for m in metrics {
        let mut row = vec![
            m.frame_index.to_string(),
            u8::from(m.is_keyframe).to_string(),
            m.covisible_size.to_string(),
            m.appearance_size.to_string(),
            m.local_map_size.to_string(),
            m.full_index_local_map_size.to_string(),
            m.table_lookups.to_string(),
            m.mapping_table_lookups.to_string(),
            m.hamming_comparisons.to_string(),
            m.objective_evaluations.to_string(),
            m.selected_tables.to_string(),
            m.matches.to_string(),
            m.inliers.to_string(),
            m.true_matches_found.to_string(),
            m.true_matches_available.to_string(),
            format!("{:.9e}", m.pose_error_rot),
            format!("{:.9e}", m.pose_error_trans),
            u8::from(m.track_lost).to_string(),
            m.long_baseline_matches.to_string(),
        ];
        row.extend(m.match_age_histogram.iter().map(u64::to_string));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world(seed: u64) -> World {
        let cfg = WorldConfig {
            seed,
            waypoints: WorldConfig::default().waypoints[..3].to_vec(),
            frames_per_segment: 10,
            ..WorldConfig::default()
        };
        generate_world(&cfg).unwrap()
    }

    #[test]
    fn world_is_seeded_and_feasible() {
        let a = small_world(3);
        let b = small_world(3);
        assert_eq!(a.points.len(), 2000);
        assert!(a.points.iter().zip(&b.points).all(|(x, y)| x.position == y.position && x.descriptor == y.descriptor));
        for f in 0..a.poses.len() {
            assert!(a.visible(f).len() >= 200);
        }
    }

    #[test]
    fn zero_fov_is_infeasible() {
        let cfg = WorldConfig { fov_deg: 0.0, ..WorldConfig::default() };
        assert!(matches!(generate_world(&cfg), Err(SimError::Infeasible { .. })));
        let cfg = WorldConfig { keyframe_interval: 0, ..WorldConfig::default() };
        assert!(matches!(generate_world(&cfg), Err(SimError::Config(_))));
    }

    #[test]
    fn clean_observations() {
        let cfg = WorldConfig {
            epsilon_range: [0, 0],
            pixel_noise_sigma: 0.0,
            waypoints: WorldConfig::default().waypoints[..2].to_vec(),
            frames_per_segment: 3,
            ..WorldConfig::default()
        };
        let world = generate_world(&cfg).unwrap();
        let obs = observe(&world, 2);
        assert_eq!(obs.len(), 200);
        let truths: BTreeSet<_> = obs.iter().map(|o| o.truth).collect();
        assert_eq!(truths.len(), obs.len());
        for o in &obs {
            assert_eq!(o.descriptor, world.points[o.truth].descriptor);
            assert!(cfg.camera.in_image(&o.measurement));
        }
    }

    #[test]
    fn noisy_observations_stay_in_image() {
        let world = small_world(1);
        for f in [0, 7, 20] {
            for o in observe(&world, f) {
                assert!(world.config.camera.in_image(&o.measurement));
            }
        }
    }

    #[test]
    fn associate_basics() {
        let ds: Vec<_> = (0..20).map(BinaryDescriptor::random).collect();
        let cands: Vec<_> = ds.iter().enumerate().map(|(i, d)| (PointId(i as u64), *d)).collect();
        let a = associate(&ds, &cands, 64, 0.8);
        assert_eq!(a.len(), 20);
        assert!(a.iter().all(|x| x.point.0 as usize == x.observation && x.distance == 0));
        assert!(associate(&ds, &[], 64, 0.8).is_empty());
    }

    #[test]
    fn ratio_test_rejects_ambiguous() {
        let d = BinaryDescriptor::random(1);
        let near = d.with_flipped([1, 2]);
        let near2 = d.with_flipped([3, 4]);
        let a = associate(&[d], &[(PointId(0), near), (PointId(1), near2)], 64, 0.8);
        assert!(a.is_empty());
        let far = BinaryDescriptor::random(2);
        let a = associate(&[d], &[(PointId(0), far), (PointId(1), near)], 64, 0.8);
        assert_eq!(a, vec![Association { observation: 0, point: PointId(1), distance: 2 }]);
        assert!(associate(&[d], &[(PointId(0), far)], 64, 0.8).is_empty());
    }

    #[test]
    fn quartiles_by_nearest_rank() {
        let s = series_stats(&(1..=100).map(f64::from).collect::<Vec<_>>()).unwrap();
        assert_eq!((s.q1, s.q3, s.mean), (25.0, 75.0, 50.5));
        let c = series_stats(&[4.0; 9]).unwrap();
        assert_eq!((c.q1, c.mean, c.q3), (4.0, 4.0, 4.0));
        assert!(series_stats(&[]).is_err());
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn moving_average() {
        assert_eq!(moving_average_budget(&[10, 20, 30, 40], 2), vec![10, 15, 25, 35]);
        assert_eq!(moving_average_budget(&[0, 0], 3), vec![1, 1]);
    }

    #[test]
    fn pipeline_runs_each_strategy() {
        let world = small_world(2);
        let cfg = TrackingConfig::default();
        let specs: Vec<_> = [
            StrategyKind::CovisOnly,
            StrategyKind::MihAll,
            StrategyKind::MihSelected,
            StrategyKind::Rnd,
            StrategyKind::Long,
        ]
        .into_iter()
        .map(StrategySpec::new)
        .collect();
        let runs = run_strategies(&world, &specs, &cfg).unwrap();
        assert_eq!(runs.len(), 5);
        let m = world.config.features_per_frame as u64;
        for (covis, all) in runs[0].frames.iter().zip(&runs[1].frames) {
            assert!(all.local_map_size <= covis.local_map_size);
        }
        for f in &runs[1].frames[1..] {
            assert_eq!(f.table_lookups, 32 * m);
        }
        for f in &runs[2].frames {
            assert!(f.table_lookups <= 8 * m);
            assert!(f.local_map_size <= f.covisible_size.min(f.appearance_size));
        }
        for run in &runs {
            let s = summarize(&run.frames).unwrap();
            assert_eq!(s.track_lost_frames, 0, "{}", run.strategy.kind);
            let total: u64 = s.match_age_histogram.iter().sum();
            let matches: usize = run.frames.iter().map(|f| f.matches).sum();
            assert_eq!(total as usize, matches);
        }
        assert!(matches!(
            run_pipeline(&world, StrategySpec::new(StrategyKind::Rnd), &cfg, None),
            Err(SimError::Config(_))
        ));
    }

    #[test]
    fn long_strategy_prefers_old_points() {
        let world = small_world(4);
        let cfg = TrackingConfig::default();
        let spec = StrategySpec { kind: StrategyKind::Long, budget: Some(150) };
        let run = run_pipeline(&world, spec, &cfg, None).unwrap();
        assert!(run.frames.iter().all(|f| f.local_map_size <= 150));
    }

    #[test]
    fn metrics_csv_header() {
        let mut buf = Vec::new();
        write_metrics_csv(&[], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("frame_index,is_keyframe,"));
        assert!(text.trim_end().ends_with("age_b9"));
    }
}
