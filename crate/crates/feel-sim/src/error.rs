//! Error types shared across the simulator.

use thiserror::Error;

/// Errors produced by simulator operations.
///
/// `InvalidArgument` means the caller handed in something outside an
/// operation's documented precondition. `ContractViolation` means an
/// internal invariant that should hold by construction was broken and
/// the run cannot continue meaningfully.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, SimError>;
