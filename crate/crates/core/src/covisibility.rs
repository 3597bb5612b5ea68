//! Keyframe co-visibility graph and local-map set algebra.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::Vector3;

use crate::descriptor::BinaryDescriptor;
use crate::error::GraphError;
use crate::mih::PointId;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyframeRecord {
    pub keyframe_id: u64,
    pub frame_index: u64,
    pub observed_point_ids: BTreeSet<PointId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapPointRecord {
    pub point_id: PointId,
    pub position: Vector3<f64>,
    pub descriptor: BinaryDescriptor,
    pub first_seen_frame: u64,
    pub observation_count: u32,
}

impl MapPointRecord {
    /// Frames elapsed since the point was first observed.
    pub fn track_length(&self, current_frame: u64) -> Result<u64, GraphError> {
        current_frame
            .checked_sub(self.first_seen_frame)
            .ok_or(GraphError::FrameOrder {
                first_seen: self.first_seen_frame,
                current: current_frame,
            })
    }
}

#[derive(Clone, Debug, Default)]
pub struct CovisibilityGraph {
    keyframes: BTreeMap<u64, KeyframeRecord>,
    point_to_keyframes: BTreeMap<PointId, BTreeSet<u64>>,
    adjacency: BTreeMap<u64, BTreeMap<u64, usize>>,
}

impl CovisibilityGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn keyframe(&self, id: u64) -> Option<&KeyframeRecord> {
        self.keyframes.get(&id)
    }

    pub fn latest_keyframe(&self) -> Option<&KeyframeRecord> {
        self.keyframes.values().next_back()
    }

    /// Adds a keyframe and returns its new edges as `(other, weight)`.
    pub fn add_keyframe(&mut self, record: KeyframeRecord) -> Result<Vec<(u64, usize)>, GraphError> {
        let id = record.keyframe_id;
        if self.keyframes.contains_key(&id) {
            return Err(GraphError::DuplicateKeyframe(id));
        }
        if record.observed_point_ids.is_empty() {
            return Err(GraphError::EmptyKeyframe(id));
        }
        let mut shared: BTreeMap<u64, usize> = BTreeMap::new();
        for p in &record.observed_point_ids {
            let kfs = self.point_to_keyframes.entry(*p).or_default();
            for &other in kfs.iter() {
                *shared.entry(other).or_default() += 1;
            }
            kfs.insert(id);
        }
        for (&other, &w) in &shared {
            self.adjacency.entry(other).or_default().insert(id, w);
        }
        self.adjacency.insert(id, shared.clone());
        self.keyframes.insert(id, record);
        Ok(shared.into_iter().collect())
    }

    pub fn edge_weight(&self, a: u64, b: u64) -> usize {
        self.adjacency
            .get(&a)
            .and_then(|n| n.get(&b))
            .copied()
            .unwrap_or(0)
    }

    /// Every edge once, as `(a, b, weight)` with `a < b`.
    pub fn edges(&self) -> Vec<(u64, u64, usize)> {
        self.adjacency
            .iter()
            .flat_map(|(&a, n)| {
                n.iter()
                    .filter(move |(&b, _)| a < b)
                    .map(move |(&b, &w)| (a, b, w))
            })
            .collect()
    }

    /// Points of the reference keyframe and of every neighbour sharing at
    /// least `min_shared` points with it.
    pub fn covisible_set(&self, reference: u64, min_shared: usize) -> Result<BTreeSet<PointId>, GraphError> {
        let kf = self
            .keyframes
            .get(&reference)
            .ok_or(GraphError::UnknownKeyframe(reference))?;
        let mut out = kf.observed_point_ids.clone();
        if let Some(neigh) = self.adjacency.get(&reference) {
            for (other, &w) in neigh {
                if w >= min_shared.max(1) {
                    out.extend(self.keyframes[other].observed_point_ids.iter().copied());
                }
            }
        }
        Ok(out)
    }

    /// Rebuilds the point index from keyframe records and compares.
    pub fn audit(&self) -> bool {
        let mut rebuilt: BTreeMap<PointId, BTreeSet<u64>> = BTreeMap::new();
        for kf in self.keyframes.values() {
            for p in &kf.observed_point_ids {
                rebuilt.entry(*p).or_default().insert(kf.keyframe_id);
            }
        }
        if rebuilt != self.point_to_keyframes {
            return false;
        }
        self.keyframes.keys().all(|a| {
            self.keyframes.keys().all(|b| {
                let expected = if a == b {
                    0
                } else {
                    self.keyframes[a]
                        .observed_point_ids
                        .intersection(&self.keyframes[b].observed_point_ids)
                        .count()
                };
                self.edge_weight(*a, *b) == expected
            })
        })
    }

    pub fn write_edges_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kf_a", "kf_b", "weight"])?;
        for (a, b, wt) in self.edges() {
            w.write_record([a.to_string(), b.to_string(), wt.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The local map `{P_h} ∩ {P_c}`.
pub fn local_map(ph: &BTreeSet<PointId>, pc: &BTreeSet<PointId>) -> BTreeSet<PointId> {
    let (small, large) = if ph.len() <= pc.len() { (ph, pc) } else { (pc, ph) };
    small.iter().filter(|p| large.contains(p)).copied().collect()
}
