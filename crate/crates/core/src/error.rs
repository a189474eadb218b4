use std::io;

use thiserror::Error;

/// Errors produced by every fallible operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("bad magic: expected \"FREF\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),

    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),

    #[error("unsupported rank {0}")]
    UnsupportedRank(u8),

    #[error("truncated header: need {expected} bytes, found {actual}")]
    TruncatedHeader { expected: usize, actual: usize },

    #[error("truncated payload: need {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("trailing bytes after payload: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },

    #[error("dimensions overflow: {0:?}")]
    DimsOverflow(Vec<u32>),

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),

    #[error("unsupported size: {0}")]
    UnsupportedSize(String),

    #[error("fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::BadMagic { .. } => "bad-magic",
            Error::UnsupportedVersion(_) => "unsupported-version",
            Error::UnsupportedDtype(_) => "unsupported-dtype",
            Error::UnsupportedRank(_) => "unsupported-rank",
            Error::TruncatedHeader { .. } => "truncated-header",
            Error::TruncatedPayload { .. } => "truncated-payload",
            Error::TrailingBytes { .. } => "trailing-bytes",
            Error::DimsOverflow(_) => "dims-overflow",
            Error::NonFinite(_) => "non-finite",
            Error::SingularMatrix(_) => "singular-matrix",
            Error::DegenerateKernel(_) => "degenerate-kernel",
            Error::UnsupportedSize(_) => "unsupported-size",
            Error::NonConvergence { .. } => "non-convergence",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Manifest { .. } => "manifest",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
