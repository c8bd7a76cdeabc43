use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Inconsistent shapes or parameters between cooperating components.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller-supplied value is outside its domain.
    #[error("invalid input: {0}")]
    Input(String),
    /// A non-finite number showed up where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// The operation has no meaning for this environment.
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    /// Training produced non-finite parameters and was aborted.
    #[error("training diverged at iteration {iteration}: {what}")]
    Diverged { iteration: usize, what: String },
}

pub type Result<T> = std::result::Result<T, Error>;
