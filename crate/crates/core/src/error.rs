use thiserror::Error;

/// Errors raised by the tensor engine, the networks and the harness.
///
/// `Dimension`, `Contract`, `Config` and `Format` are caller mistakes
/// (CLI exit code 1); `Numeric` and `Degenerate` are runtime numeric
/// failures (CLI exit code 2).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// Zero-variance signal: Pearson correlation is undefined.
    #[error("degenerate signal: {0}")]
    Degenerate(String),

    #[error("malformed file at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric { op, detail: detail.into() }
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format { offset, detail: detail.into() }
    }

    /// Process exit code the harness maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } | Error::Degenerate(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
