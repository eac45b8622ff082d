use scl_autodiff::AdError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or arguments.
    #[error("config error: {0}")]
    Config(String),
    /// Inputs violate an operation's preconditions.
    #[error("contract violation: {0}")]
    Contract(String),
    /// An argument lies outside an operation's domain.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
