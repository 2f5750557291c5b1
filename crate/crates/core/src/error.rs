use thiserror::Error;

/// Errors surfaced by the scattering library.
#[derive(Debug, Error)]
pub enum Error {
    /// Array length or shape violates an operation's contract.
    #[error("size error: {0}")]
    Size(String),
    /// A filter cannot be represented on the requested grid.
    #[error("resolution error: {0}")]
    Resolution(String),
    /// Invalid hyperparameter combination.
    #[error("configuration error: {0}")]
    Config(String),
    /// Two coefficient sets do not share paths or shapes.
    #[error("incompatible coefficient sets: {0}")]
    Incompatible(String),
    /// A backward pass was asked for intermediates that were not retained.
    #[error("state error: {0}")]
    State(String),
    /// Non-finite values or a diverging computation.
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
