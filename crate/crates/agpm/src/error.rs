use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("kernel spec parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("invalid kernel structure: {0}")]
    Kernel(String),

    #[error("theta layout mismatch: expected {expected} entries, got {got}")]
    ThetaLayout { expected: usize, got: usize },

    #[error("invalid hyperparameter: {0}")]
    Hyperparameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("Cholesky factorization failed after jitter ladder (non-PSD or ill-conditioned kernel)")]
    CholeskyFailed,

    #[error("input gradient unsupported: {0}")]
    GradientUnsupported(String),

    #[error("negative predictive variance {0} beyond round-off tolerance")]
    NegativeVariance(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("incompatible model/target pairing: {0}")]
    Incompatible(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
