//! Appearance-prior local-map building for visual SLAM.
//!
//! Map points are indexed by their 256-bit binary descriptors in a
//! multi-index hash ([`mih`]). A frame's descriptors query the index to form
//! the appearance set `{P_h}`, which is intersected with the co-visibility
//! set `{P_c}` ([`covisibility`]) to give a compact local map. The subset of
//! hash tables queried between keyframes is picked greedily to maximize the
//! log-determinant of the pose information of the matches it recovers
//! ([`selection`], [`geometry`]). [`recall`] models retrieval probability
//! under bit noise and [`sim`] exercises the whole pipeline on a synthetic
//! world.

pub mod covisibility;
pub mod descriptor;
pub mod error;
pub mod geometry;
pub mod mih;
pub mod recall;
pub mod seeding;
pub mod selection;
pub mod sim;

pub use descriptor::{BinaryDescriptor, PerturbationModel, PerturbationSpec, DESCRIPTOR_BITS};
pub use error::{DescriptorError, GeometryError, GraphError, MihError, SelectionError, SimError};
pub use mih::{MihConfig, MihIndex, PointId};
