use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DescriptorError {
    #[error("table count {0} outside 1..=256")]
    TableCount(usize),
    #[error("cannot flip {0} distinct bits of a 256-bit descriptor")]
    Epsilon(usize),
    #[error("invalid descriptor hex {0:?}: expected 64 hex digits")]
    Hex(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MihError {
    #[error("table count {0} outside 1..=256")]
    TableCount(usize),
    #[error("bucket capacity must be at least 1")]
    BucketCapacity,
    #[error("table index {index} out of range for {tables} tables")]
    TableIndex { index: usize, tables: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("keyframe {0} already present")]
    DuplicateKeyframe(u64),
    #[error("keyframe {0} observes no points")]
    EmptyKeyframe(u64),
    #[error("unknown keyframe {0}")]
    UnknownKeyframe(u64),
    #[error("current frame {current} precedes first observation at frame {first_seen}")]
    FrameOrder { first_seen: u64, current: u64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("need at least 3 matches, got {0}")]
    TooFewMatches(usize),
    #[error("normal equations are singular (eigenvalue ratio {0:e})")]
    Singular(f64),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SelectionError {
    #[error("exhaustive search limited to 12 tables, got {0}")]
    TooLarge(usize),
    #[error("table index {index} out of range for {tables} tables")]
    TableIndex { index: usize, tables: usize },
    #[error("match index {index} out of range for {matches} matches")]
    MatchIndex { index: usize, matches: usize },
    #[error("cardinality constraint must be at least 1")]
    Cardinality,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("frame {frame} sees {visible} points, fewer than the {required} required")]
    Infeasible {
        frame: usize,
        visible: usize,
        required: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("summary of an empty metric series")]
    EmptySeries,
    #[error(transparent)]
    Mih(#[from] MihError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
}
