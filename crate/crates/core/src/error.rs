use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("I/O error on {path}: {source}")]
    IoPath {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("span [{start}, {end}) out of range for sequence of length {len}")]
    SpanBounds { start: usize, end: usize, len: usize },

    #[error("invalid example: {0}")]
    InvalidExample(String),

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("{0}")]
    Config(String),

    #[error("position {position} in segment {segment} ({segment_name}) exceeds max positions {max}")]
    PositionOverflow {
        segment: u8,
        segment_name: &'static str,
        position: usize,
        max: usize,
    },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite values produced by {0}")]
    NonFinite(String),

    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("hint extractor not configured for {0:?}")]
    ExtractorNotConfigured(String),

    #[error("missing translation for source line {line}")]
    MissingTranslation { line: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoPath {
            path: path.into(),
            source,
        }
    }
}
