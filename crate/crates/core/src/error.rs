use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label set: {0}")]
    Labels(String),

    #[error("row {row}: {field}: {message}")]
    Row {
        row: usize,
        field: String,
        message: String,
    },

    #[error("input: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("did not converge: {0}")]
    NotConverged(String),

    #[error("rank-deficient design: collinear columns {0:?}")]
    RankDeficient(Vec<String>),

    #[error("no matched blocks between {a} and {b}")]
    NoMatchedBlocks { a: String, b: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
