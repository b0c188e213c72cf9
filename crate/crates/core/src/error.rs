use thiserror::Error;

/// Errors raised by every module of the crate.
#[derive(Debug, Error)]
pub enum EgaError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("configuration error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },
    #[error("input error: {0}")]
    Input(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EgaError>;

impl EgaError {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        EgaError::Shape { op, lhs, rhs }
    }
}
