use thiserror::Error;

/// Errors raised by the compression library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("rank {rank} out of range for {what} (allowed 1..={max})")]
    RankOutOfRange {
        what: &'static str,
        rank: usize,
        max: usize,
    },

    #[error("expected {expected} ranks for {method}, got {got}")]
    RankArity {
        method: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("singular system: {0}")]
    Singular(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("method mismatch: expected {expected}, got {got}")]
    MethodMismatch {
        expected: &'static str,
        got: &'static str,
    },

    #[error("budget infeasible: {0}")]
    Infeasible(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("container: {0}")]
    Container(#[from] crate::container::ContainerError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
