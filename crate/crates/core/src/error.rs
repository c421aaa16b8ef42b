//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SafeLmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("key generation failed: {0}")]
    KeyGeneration(String),

    #[error("plaintext {value} outside the encodable range (|m| < n/2)")]
    PlaintextRange { value: i64 },

    #[error("ciphertext is not a unit modulo n^2")]
    CorruptCiphertext,

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("decrypted aggregate magnitude {magnitude} exceeds client count {clients}")]
    AggregateIntegrity { magnitude: i64, clients: usize },

    #[error("training diverged at round {round}: {detail}")]
    Divergence { round: usize, detail: String },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SafeLmError>;

impl SafeLmError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        SafeLmError::InvalidArgument(msg.into())
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        SafeLmError::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
