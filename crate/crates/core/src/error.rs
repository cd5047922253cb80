use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical instability at coordinate {coordinate}: {detail}")]
    NumericalInstability { coordinate: usize, detail: String },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("degenerate input in {set}: {detail}")]
    DegenerateInput { set: String, detail: String },

    #[error("metric registration failed: {0}")]
    Registration(String),

    #[error("candidate generator exhausted after {completed} of {requested} batches")]
    PartialReport { completed: usize, requested: usize },

    #[error("unsupported request: {0}")]
    Unsupported(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by non-finite numbers or training blow-ups.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalInstability { .. } | Error::Divergence(_) | Error::DegenerateInput { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Returns a contract violation unless `cond` holds.
#[inline]
pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Contract(msg()))
    }
}
