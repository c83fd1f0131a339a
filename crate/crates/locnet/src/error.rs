//! Crate-wide error type.

use crate::agent::AgentId;

/// Errors surfaced by simulator operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown agent id {0}")]
    UnknownAgent(AgentId),

    #[error("agent {0} has no neighborhood sets (targets do not measure)")]
    NotACa(AgentId),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sample index {index} out of range for sets of size {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("particle sets have mismatched sample counts: {0} vs {1}")]
    MismatchedSampleCounts(usize, usize),

    #[error("particle set must contain at least one sample")]
    EmptyParticleSet,

    #[error("particle weights must be nonnegative, finite, and not all zero")]
    InvalidWeights,

    #[error("sampling box is degenerate (zero area)")]
    DegenerateBox,

    #[error("distance must be nonnegative, got {0}")]
    NegativeDistance(f64),

    #[error("positions coincide; likelihood gradient is singular at zero distance")]
    CoincidentPositions,

    #[error("all reweighted particle log-weights underflowed; belief diverged")]
    BeliefDiverged,

    #[error("missing measurement for pair ({0}, {1})")]
    MissingMeasurement(AgentId, AgentId),

    #[error("communication graph is disconnected; unreachable nodes: {0:?}")]
    Disconnected(Vec<usize>),

    #[error("topology is asymmetric: {0} lists {1} as neighbor but not vice versa")]
    AsymmetricTopology(AgentId, AgentId),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
