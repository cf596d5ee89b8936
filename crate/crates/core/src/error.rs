use thiserror::Error;

/// Errors produced by network construction, solvers and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("singular passive block in Kron reduction: {0}")]
    SingularPassiveBlock(String),

    #[error("no equilibrium found from this start after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular Newton matrix at iteration {iteration}; iterate delta={delta:?} E={voltage:?}")]
    SingularJacobian {
        iteration: usize,
        delta: Vec<f64>,
        voltage: Vec<f64>,
    },

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("eigenvalue computation did not converge")]
    EigenFailure,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid parameter path `{0}`")]
    InvalidPath(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
