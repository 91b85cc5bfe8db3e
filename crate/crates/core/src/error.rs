use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("tensor format error: {0}")]
    Format(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("failed to load utterance {id}: {reason}")]
    Load { id: String, reason: String },

    #[error("pitch contour has no voiced frames")]
    EmptyContour,

    #[error("empty pitch segment")]
    EmptySegment,

    #[error("word {word} has an empty frame span")]
    DegenerateSpan { word: usize },

    #[error("break index {index} out of range for {words} words")]
    BreakOutOfRange { index: usize, words: usize },

    #[error("no break after word {0}")]
    BreakNotPresent(usize),

    #[error("alignment infeasible: {frames} frames for {tokens} tokens")]
    InfeasibleAlignment { frames: usize, tokens: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("no reference last words to attend over")]
    NoReferenceLastWords,

    #[error("unknown speaker {0}")]
    UnknownSpeaker(usize),

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
