use std::path::PathBuf;

/// Errors raised by the cyclecap library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown word {word:?} at position {position}")]
    Lexical { word: String, position: usize },

    #[error("invalid caption: {0}")]
    Caption(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure at step {step}: {detail}")]
    Numerical { step: u64, detail: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("malformed {kind} input: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
