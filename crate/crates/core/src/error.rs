use thiserror::Error;

pub type Result<T> = std::result::Result<T, MrtError>;

#[derive(Debug, Error)]
pub enum MrtError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate subspace: row {row} has residual norm {norm:e} after orthogonalization")]
    Degenerate { row: usize, norm: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MrtError {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            MrtError::Config(_) | MrtError::Json(_) => 1,
            MrtError::Integrity(_) => 3,
            _ => 2,
        }
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(MrtError::Dimension(msg.into()))
}
