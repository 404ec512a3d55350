use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// The car-following model was queried with a non-positive bumper gap.
    #[error("degenerate gap {gap} m: a crash must be detected before the model is queried")]
    DegenerateGap { gap: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training failed: {0}")]
    Training(String),

    /// Representations without variance have no principal direction.
    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("stage failed: {0}")]
    Stage(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
