use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments violating its contract
    /// (mismatched shapes, asymmetric input to a symmetric solver, ...).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// The prompt row statistics moved, so the LayerNorm shift identity
    /// does not apply.
    #[error("row statistics drifted by {drift:e} (mean) / {std_drift:e} (std)")]
    StatDrift { drift: f64, std_drift: f64 },

    /// A loss or update became NaN/Inf during training.
    #[error("training diverged at task {task}, step {step}: {detail}")]
    Diverged {
        task: usize,
        step: usize,
        detail: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Contract {
        op,
        detail: detail.into(),
    }
}
