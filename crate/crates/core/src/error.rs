use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("level {level} out of range (complex has levels 0..={dim})")]
    LevelOutOfRange { level: usize, dim: usize },

    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    ShapeMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("inconsistent orientation on coarse {level}-cell {cell}: |sum| = {sum}, constituents = {count}")]
    Orientation {
        level: usize,
        cell: usize,
        sum: i64,
        count: i64,
    },

    #[error("singular matrix (pivot {pivot} at column {column})")]
    Singular { column: usize, pivot: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(&'static str),

    #[error("incompatible data: {0}")]
    Incompatible(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_len(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch {
            expected,
            got,
            context,
        });
    }
    Ok(())
}
