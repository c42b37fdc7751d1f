use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a precondition (shape, length or range).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown atom type `{0}`")]
    UnknownAtomType(String),

    /// Torsion tree or atom-table structure is inconsistent.
    #[error("invalid structure: {0}")]
    Structure(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("format error at line {line}: {message}")]
    FormatAtLine { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Non-finite objective or gradient at the starting point of an optimization.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("result sets are misaligned; missing pose ids: {}", .missing.join(", "))]
    Alignment { missing: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
