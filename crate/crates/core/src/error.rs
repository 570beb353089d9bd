use thiserror::Error;

/// Errors shared by every module of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Non-finite values or other numeric breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Token id outside the vocabulary, or a malformed vocabulary.
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// Corpus-level problems: mismatched line counts, empty corpora.
    #[error("data error: {0}")]
    Data(String),

    /// Index out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Malformed checkpoint, alignment, or config file.
    #[error("format error: {0}")]
    Format(String),

    #[error("filesystem error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
