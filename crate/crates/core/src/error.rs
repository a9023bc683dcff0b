use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt trace: truncated or malformed row at layer {layer}, head {head}, step {step}")]
    Corrupt { layer: u32, head: u32, step: i64 },

    #[error("corrupt trace: {0}")]
    CorruptSection(String),

    #[error("invalid row at layer {layer}, head {head}, step {step}: {reason}")]
    Validation {
        layer: u32,
        head: u32,
        step: i64,
        reason: String,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("selector state error: {0}")]
    State(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Coarse class used by the command-line front end to pick an exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Training { .. })
    }
}
