use thiserror::Error;

/// Errors shared by every analysis in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: bad references, shapes, or parameters.
    #[error("invalid input: {0}")]
    Invalid(String),
    /// The request cannot be satisfied on the given machine; the message names the binding limit.
    #[error("infeasible: {0}")]
    Infeasible(String),
    /// A stream violated the sequence-id protocol.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// Inconsistent hardware configuration (e.g. overlapping address ranges).
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn infeasible(msg: impl Into<String>) -> Self {
        Error::Infeasible(msg.into())
    }
}
