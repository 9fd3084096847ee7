use thiserror::Error;

/// Errors raised anywhere in the toolkit. The `Display` output starts with a
/// category word so command-line callers can surface it verbatim.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("convergence error: {what} did not converge after {iterations} iterations")]
    Convergence { what: &'static str, iterations: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("schema error at row {row}: {msg}")]
    Schema { row: usize, msg: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("dimension error: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("sign error: {0}")]
    Sign(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
