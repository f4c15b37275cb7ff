use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A primitive received operands with incompatible shapes.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("infeasible mask request: {0}")]
    Feasibility(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("magic mismatch: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: String, found: String },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("corrupt payload: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
