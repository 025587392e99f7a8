use thiserror::Error;

/// Errors surfaced by the lifting pipeline, the synthetic gym and their file formats.
///
/// Shape mismatches inside the computation graph are programming errors and
/// panic with both shapes in the message instead of being reported here.
#[derive(Debug, Error)]
pub enum AlftError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parameter health check failed: {0}")]
    ParameterHealth(String),

    #[error("non-finite activation at {0}")]
    NonFinite(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("malformed container: {0}")]
    Container(String),

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AlftError> = std::result::Result<T, E>;
