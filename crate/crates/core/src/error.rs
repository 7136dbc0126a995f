use thiserror::Error;

/// Errors raised across the routing engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("embedding error (retriable): {0}")]
    Embedding(String),

    #[error("backend error (retriable): {0}")]
    Backend(String),

    #[error("backend configuration error: {0}")]
    BackendConfig(String),

    #[error("empty generation")]
    EmptyGeneration,

    #[error("control role has no prompt: {0}")]
    ControlRole(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors that stem from configuration rather than runtime conditions.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Dimension(_) | Error::BackendConfig(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
