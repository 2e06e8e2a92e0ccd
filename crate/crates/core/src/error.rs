use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("abundance column {column} violates the simplex constraint: {reason}")]
    Simplex { column: usize, reason: String },
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("rank-deficient endmember matrix (condition estimate {condition:e})")]
    RankDeficient { condition: f64 },
    #[error("no albedo in (0, 1) reproduces reflectance at band {band}")]
    HapkeNoRoot { band: usize },
    #[error("singular normal matrix (condition estimate {condition:e})")]
    Singular { condition: f64 },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
