use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model parameters: {0}")]
    InvalidModel(String),

    #[error("invalid jump specification: {0}")]
    InvalidJumpSpec(String),

    #[error("invalid scheme configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid dividend schedule: {0}")]
    InvalidDividends(String),

    #[error("grid mismatch: expected {expected} nodes, got {actual}")]
    GridMismatch { expected: usize, actual: usize },

    #[error("field kind mismatch: {0}")]
    FieldKind(String),

    #[error("singular system: pivot {pivot:e} at row {row}")]
    Singular { row: usize, pivot: f64 },

    #[error("linear solve failed: relative residual {residual:e}")]
    SolverFailure { residual: f64 },

    #[error("matrix exponential did not converge: {0}")]
    Exponential(String),

    #[error("dense oracle size guard: {size} unknowns exceeds {max}")]
    SizeGuard { size: usize, max: usize },

    #[error("fourier resolution insufficient: put-call parity error {parity_error:e}")]
    Resolution { parity_error: f64 },

    #[error("reference price is zero")]
    ZeroReference,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input rather than by a numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidModel(_)
                | Error::InvalidJumpSpec(_)
                | Error::InvalidConfig(_)
                | Error::InvalidGrid(_)
                | Error::InvalidDividends(_)
                | Error::GridMismatch { .. }
                | Error::FieldKind(_)
                | Error::SizeGuard { .. }
                | Error::ZeroReference
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
