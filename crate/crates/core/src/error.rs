use thiserror::Error;

/// Errors raised by the solvers and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty environment: mean-field average needs at least one sample")]
    EmptyEnvironment,

    #[error("non-finite value from {what} at probe {probe}")]
    NonFinite { what: String, probe: usize },

    #[error("state diverged at step {step} (replication {rep}): |x| = {magnitude:e}")]
    Divergence { step: usize, rep: usize, magnitude: f64 },

    #[error("model `{0}` has no closed form")]
    MissingClosedForm(String),

    #[error("ensemble too small: {what} needs at least {needed}, got {got}")]
    TooSmall { what: String, needed: usize, got: usize },

    #[error("comparison precondition violated: {0}")]
    OrderingViolated(String),

    #[error("covariance not factorizable even with jitter {jitter:e}")]
    NotFactorizable { jitter: f64 },

    #[error("missing input: {0}")]
    Missing(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
