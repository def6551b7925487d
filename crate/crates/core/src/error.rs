use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite (pivot {pivot} of {size})")]
    NotPositiveDefinite { pivot: usize, size: usize },

    #[error("linear solve failed: relative residual {residual:.3e}")]
    SolverFailed { residual: f64 },

    #[error("reduced system is rank deficient at coarse node {coarse_node} (basis {basis})")]
    RankDeficient { coarse_node: usize, basis: usize },

    #[error("eigenproblem failed: {0}")]
    Eigen(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
