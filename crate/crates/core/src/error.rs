use alloc::string::String;

/// Errors raised by the core tracker, simulator and training routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no usable labels: {0}")]
    EmptyLabels(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    TrainingDiverged { epoch: usize, step: usize, loss: f64 },
    #[error("weights mismatch: {0}")]
    Weights(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Short machine-parseable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::EmptyLabels(_) => "EmptyLabels",
            Error::TrainingDiverged { .. } => "TrainingDiverged",
            Error::Weights(_) => "WeightsError",
            Error::NotFound(_) => "NotFound",
            Error::Format(_) => "FormatError",
            Error::Io(_) => "IoError",
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}
pub(crate) use invalid;
