use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("sentence {id}: span {label} [{start}, {end}) out of bounds for {len} words")]
    SpanOutOfBounds {
        id: String,
        label: String,
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("sentence {id}: spans [{first_start}, {first_end}) and [{second_start}, {second_end}) overlap")]
    OverlappingSpans {
        id: String,
        first_start: usize,
        first_end: usize,
        second_start: usize,
        second_end: usize,
    },

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),

    #[error("invalid sentence {id}: {message}")]
    InvalidSentence { id: String, message: String },

    #[error("dangling I- tag at position {position} (strict mode)")]
    DanglingInside { position: usize },

    #[error("tag id {0} outside the tag vocabulary")]
    UnknownTag(usize),

    #[error("invalid tokenization: {0}")]
    InvalidTokenization(String),

    #[error("embedding file: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("embedding file: unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("embedding file truncated: {0}")]
    Truncated(String),

    #[error("non-finite value at row {row}, column {col} of `{id}`")]
    NonFinite { id: String, row: usize, col: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("missing embeddings for sentence `{0}`")]
    MissingEmbeddings(String),

    #[error("non-finite loss at epoch {epoch}, sentence `{id}`")]
    NonFiniteLoss { epoch: usize, id: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
