use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated input: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("slice [{start}, {start}+{len}) out of range for {frames} frames")]
    SliceOutOfRange {
        start: usize,
        len: usize,
        frames: usize,
    },

    #[error("cannot fit {k} centroids to {n} points")]
    TooFewPoints { k: usize, n: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown speaker {0:?}")]
    UnknownSpeaker(String),

    #[error("speaker {speaker:?} has {frames} frames, fewer than k = {k}")]
    SpeakerTooSmall {
        speaker: String,
        frames: usize,
        k: usize,
    },

    #[error("zero-norm frame {index}: cosine similarity undefined")]
    ZeroNorm { index: usize },

    #[error("utterance of {frames} frames is shorter than the minimum {min}")]
    UtteranceTooShort { frames: usize, min: usize },

    #[error("conversion mode drawn but no matching pool is configured")]
    NoPool,

    #[error("every position is masked")]
    AllMasked,

    #[error("unmasked span of {span} frames is shorter than the SSIM window {window}")]
    SpanTooShort { span: usize, window: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
