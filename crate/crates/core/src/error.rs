use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty matrix rejected")]
    EmptyMatrix,

    #[error("non-finite value at row {row}")]
    NonFinite { row: usize },

    #[error("degenerate embedding at row {row}")]
    DegenerateRow { row: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("configuration error: {0}")]
    Config(String),

    /// Candidate lies in the span of the current selection; callers prune it.
    #[error("candidate is linearly dependent on the selection (z = {z:e})")]
    Dependent { z: f64 },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("row {row}: {source}")]
    AtRow {
        row: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn at_row(self, row: usize) -> Self {
        Error::AtRow {
            row,
            source: alloc::boxed::Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
