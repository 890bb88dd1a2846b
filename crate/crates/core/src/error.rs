use thiserror::Error;

/// Errors produced by the simulation, estimation, and training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A structural constraint on dimensions or degrees is violated.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// More pilot sequences were requested than the bank can supply.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Spreading-graph construction did not converge within its retry budget.
    #[error("construction error: {0}")]
    Construction(String),

    /// A non-finite value survived the variance clamps.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Bad magic, version, or truncated payload in a binary file.
    #[error("format error: {0}")]
    Format(String),

    /// A dataset or checkpoint was produced under a different configuration.
    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),

    /// Config-file syntax problems, including unknown keys.
    #[error("config error: {0}")]
    Config(String),

    /// A normal matrix was numerically singular.
    #[error("singular system: {0}")]
    Singularity(String),

    /// The requested metric is undefined for this sample.
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    /// A forward cache was paired with weights or inputs it was not built from.
    #[error("cache mismatch: {0}")]
    CacheMismatch(String),

    /// A weight array does not match the shape demanded by its sparsity mask.
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, Error>;
