use std::path::PathBuf;

/// Errors raised by the tensor engine, model assembly, and data pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or hyper-parameters that cannot be wired together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad user-supplied values such as out-of-range labels.
    #[error("input error: {0}")]
    Input(String),

    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    /// Batch-norm statistics requested over fewer than two values.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("training error: {0}")]
    Training(String),

    /// A non-finite value appeared while finite checks were enabled.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("data generation error: {0}")]
    Generation(String),

    #[error("ingestion error at {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
