use std::io;

/// Errors raised anywhere in the pipeline.
///
/// The variants map onto the command-line exit classes: input problems,
/// numeric failures and checkpoint/vocabulary incompatibilities.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input too short: {needed} samples needed, got {got}")]
    InputTooShort { needed: usize, got: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("degenerate variance: batch normalization needs more than one value per channel in train mode")]
    DegenerateVariance,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("incompatible: {0}")]
    Compatibility(String),

    #[error("wav decode error: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
