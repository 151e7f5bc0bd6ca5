use thiserror::Error;

/// Errors across the library. Each variant maps to a process exit code
/// at the CLI boundary: usage errors exit 1, data errors exit 2,
/// numerical failures exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("missing edge feature for {edge}")]
    MissingFeature { edge: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Parse { .. } | Error::MissingFeature { .. } | Error::Io(_) | Error::Json(_) => 2,
            Error::NonFinite { .. } => 3,
            Error::Shape { .. } | Error::Domain { .. } => 1,
        }
    }
}
