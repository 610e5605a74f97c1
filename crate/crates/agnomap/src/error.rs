use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Model or pipeline wiring is wrong (shape chains, missing layers).
    #[error("configuration error: {0}")]
    Config(String),
    /// Caller handed us invalid data (bad labels, shape mismatch, empty input).
    #[error("input error: {0}")]
    Input(String),
    /// Training diverged or failed to reach a required operating point.
    #[error("training error: {0}")]
    Training(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed checkpoint or image file.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
