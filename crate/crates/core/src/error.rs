use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Problems decoding one of the binary formats (embedding files, index blobs,
/// trained parameter files).
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },
    #[error("truncated input while reading {what}")]
    Truncated { what: &'static str },
    #[error("corrupt payload: {0}")]
    Corrupt(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("row {row} has zero norm and cannot be normalized")]
    DegenerateRow { row: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("input is empty after tokenization")]
    EmptyInput,
    #[error("length mismatch for {what}: expected {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("duplicate passage id {0:?}")]
    DuplicateId(String),
    #[error("passage {0:?} not found")]
    NotFound(String),
    #[error("no index at {0} (manifest missing)")]
    IndexAbsent(PathBuf),
    #[error("stale index: built for encoder {found}, requested {expected}")]
    StaleIndex { expected: String, found: String },
    #[error("could not parse span list from response: {raw:?}")]
    SpanParse { raw: String },
    #[error("llm request failed: {0}")]
    Llm(String),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by caller input (bad files, arguments, missing ids) as
    /// opposed to internal failures.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFinite { .. } | Error::NonFiniteLoss { .. })
    }
}
