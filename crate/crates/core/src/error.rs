use thiserror::Error;

/// Errors surfaced by the attention, caching, calibration and solver layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("query row {row} has no unmasked key")]
    FullyMaskedRow { row: usize },

    #[error("block size must be nonzero")]
    ZeroBlockSize,

    #[error("cache miss for layer {layer}, head {head}")]
    CacheMiss { layer: usize, head: usize },

    #[error("reference output is constant; relative squared error is undefined")]
    DegenerateReference,

    #[error("brute-force instance too large: {assignments} assignments exceed the limit of {limit}")]
    InstanceTooLarge { assignments: f64, limit: u64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("malformed tensor dump: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
