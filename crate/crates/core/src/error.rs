use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("iteration diverged (non-finite value) at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("no grid point yields a finite average AoI")]
    NoFeasiblePoint,

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("pilot columns are not unit norm (max deviation {deviation:e})")]
    NotNormalized { deviation: f64 },

    #[error("sparsity s = {s} exceeds the admissible level {s_admissible}; the error bound is vacuous")]
    Inadmissible { s: usize, s_admissible: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("dataset element {index} is outside H(B, s, sigma): {reason}")]
    MembershipViolation { index: usize, reason: String },

    #[error("backward pass needs the forward trajectory")]
    MissingTrajectory,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("scheme `{0}` needs a trained checkpoint that is missing")]
    MissingCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
