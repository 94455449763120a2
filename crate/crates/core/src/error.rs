use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of a mathematical function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke a precondition (shape mismatch, missing input, bad id).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration failed validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Enumeration would exceed the configured state cap.
    #[error("resource limit: {0}")]
    Resource(String),

    /// Training produced a non-finite quantity.
    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String, dump: String },

    /// A verification harness could not build the requested configuration.
    #[error("setup failed: {0}")]
    Setup(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
