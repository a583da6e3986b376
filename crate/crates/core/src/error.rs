//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("empty signal")]
    EmptySignal,
    #[error("silent signal: {0}")]
    SilentSignal(String),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("signal too short: {len} samples, need at least {min}")]
    SignalTooShort { len: usize, min: usize },
    #[error("spectrogram geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("non-finite value in {0}")]
    NumericError(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("pool `{pool}` exhausted: need {need}, have {have}")]
    InsufficientPool {
        pool: String,
        need: usize,
        have: usize,
    },
    #[error("clip too short: {got_s:.3} s, minimum {min_s:.3} s")]
    TooShort { got_s: f64, min_s: f64 },
    #[error("class {class} has {count} items, too few to split three ways")]
    TooFewForSplit { class: u8, count: usize },
    #[error("prediction coverage error: {0}")]
    CoverageError(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("invalid manifest: {0}")]
    BadManifest(String),
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("invalid wav file {path}: {detail}")]
    BadWav { path: String, detail: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
