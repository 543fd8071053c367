use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dependency cycle among nodes {0:?}")]
    CycleDetected(Vec<usize>),

    #[error("domain violation: {0}")]
    DomainViolation(String),

    #[error("product grid of {atoms} atoms exceeds the cap of {cap}")]
    GridTooLarge { atoms: u128, cap: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("instance of {rows}x{cols} atoms exceeds the exact solver cap of {cap}")]
    InstanceTooLarge { rows: usize, cols: usize, cap: usize },

    #[error("solver stopped after {iterations} iterations with residual {residual:e}")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("coordinate count mismatch: {left} vs {right}")]
    CoordinateCountMismatch { left: usize, right: usize },

    #[error("axis {axis} out of range for {count} coordinates")]
    AxisOutOfRange { axis: usize, count: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("rank-deficient design for node {node}")]
    RankDeficient { node: usize },

    #[error("invalid input at `{path}`: {message}")]
    Invalid { path: String, message: String },
}

impl Error {
    pub(crate) fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
