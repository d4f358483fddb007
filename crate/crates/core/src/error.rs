use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Checkpoint decoding failures. Each variant carries a stable numeric code.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("truncated checkpoint: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("unknown model kind tag {0}")]
    UnknownModelKind(u8),
    #[error("unknown architecture tag {0}")]
    UnknownArch(u32),
    #[error("parameter count {found} does not match architecture (expected {expected})")]
    LengthMismatch { found: u64, expected: u64 },
    #[error("{0} trailing bytes after parameter block")]
    TrailingBytes(u64),
    #[error("inconsistent checkpoint contents: {0}")]
    Inconsistent(String),
}

impl FormatError {
    pub fn code(&self) -> u32 {
        match self {
            FormatError::BadMagic { .. } => 10,
            FormatError::UnsupportedVersion { .. } => 11,
            FormatError::Truncated { .. } => 12,
            FormatError::UnknownModelKind(_) => 13,
            FormatError::UnknownArch(_) => 14,
            FormatError::LengthMismatch { .. } => 15,
            FormatError::TrailingBytes(_) => 16,
            FormatError::Inconsistent(_) => 17,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
    #[error("checkpoint format error (code {code}): {0}", code = .0.code())]
    Format(#[from] FormatError),
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("generation failed after {attempts} attempts: {message}; last reply: {last_reply:?}")]
    Generation {
        attempts: usize,
        message: String,
        last_reply: String,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
