use thiserror::Error;

use crate::graph::{OpId, TensorId, ValidationReport};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph:\n{0}")]
    InvalidGraph(ValidationReport),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("unknown tensor {0}")]
    UnknownTensor(TensorId),
    #[error("unknown op {0}")]
    UnknownOp(OpId),
    #[error("channel {0} has zero bandwidth")]
    ZeroBandwidth(&'static str),
    #[error("invalid machine model: {0}")]
    InvalidMachine(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid offload plan: {0}")]
    InvalidPlan(String),
    #[error("{0} is not a cache operator")]
    NotCacheOp(OpId),
    #[error("position {position} is outside the feasible range {lo}..={hi} of {op}")]
    InfeasiblePosition {
        op: OpId,
        position: usize,
        lo: usize,
        hi: usize,
    },
    #[error("graph has {ops} ops; exhaustive search is limited to {limit}")]
    GraphTooLarge { ops: usize, limit: usize },
    #[error("{op} reads {tensor} while it is not device-resident")]
    NotResident { op: OpId, tensor: TensorId },
    #[error("allocator invariant broken: {0}")]
    Allocator(String),
    #[error("{0}")]
    Parse(String),
}
