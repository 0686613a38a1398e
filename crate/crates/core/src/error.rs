use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported bit depth {0} (only 8-bit images are accepted)")]
    BitDepth(u32),
    #[error("zero-area image")]
    ZeroArea,
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("unknown label token `{0}`")]
    UnknownLabel(String),
    #[error("duplicate path {0}")]
    DuplicatePath(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: String, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("magic mismatch")]
    MagicMismatch,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload")]
    TruncatedPayload,
    #[error("inconsistent bundle: {0}")]
    Bundle(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("unmatched stem `{stem}`: {reason}")]
    Unmatched { stem: String, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}
