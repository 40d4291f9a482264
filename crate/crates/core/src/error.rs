use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("grid spacing {h} does not resolve obstacle size {epsilon} (need h <= epsilon/8)")]
    UnderResolved { h: f64, epsilon: f64 },

    #[error("mask selects no nodes")]
    EmptyMask,

    #[error("right-hand side has nonzero mean {mean:e} (solvability requires zero mean)")]
    NonZeroMean { mean: f64 },

    #[error("source not supported in the inner half of the grid ({fraction:e} of its mass lies outside)")]
    SupportViolation { fraction: f64 },

    #[error("time step {dt:e} exceeds stability limit {limit:e}")]
    Stability { dt: f64, limit: f64 },

    #[error("iterative solver stalled after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("cell problem ({i},{j}) failed: {source}")]
    Cell {
        i: usize,
        j: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("singular constraint system")]
    Singular,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("bad snapshot: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
