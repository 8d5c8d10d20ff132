use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("invalid {what} range: {detail}")]
    InvalidRange { what: &'static str, detail: String },

    #[error("{what} = {value} m is not a whole number of {spacing} m cells")]
    Misaligned {
        what: String,
        value: f64,
        spacing: f64,
    },

    #[error("refinement ratio must be odd and greater than one (got {0})")]
    InvalidRatio(usize),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("missing hanging variable: {0}")]
    MissingHangingVariable(String),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("system with {unknowns} unknowns exceeds the dense size guard of {limit}")]
    SizeGuard { unknowns: usize, limit: usize },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("instability detected at step {step}: {reason}")]
    Instability { step: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
