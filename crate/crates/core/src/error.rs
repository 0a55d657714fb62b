use thiserror::Error;

/// Errors raised anywhere in the fitting / adjustment / inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("index vector must be nonzero")]
    ZeroIndex,

    #[error("response {value} is outside the response set of the {loss} loss")]
    ResponseOutOfSet { loss: &'static str, value: f64 },

    #[error("solver did not converge after {iterations} iterations (kkt residual {kkt_residual:.3e})")]
    NonConvergence {
        iterations: usize,
        kkt_residual: f64,
        /// KKT residual over the last outer iterations.
        trace: Vec<f64>,
    },

    #[error(
        "the data appear linearly separable and the unregularized minimizer does not exist; \
         refit with a coercive guard (fit_coercive / --coercive-K)"
    )]
    Separable,

    #[error("KKT conditions violated: max residual {max_residual:.3e}")]
    KktViolation { max_residual: f64 },

    #[error("unsupported penalty: {0}")]
    UnsupportedPenalty(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("covariance information is required for {0}")]
    MissingCovariance(&'static str),

    #[error("ground truth (index and covariance) is required for {0}")]
    MissingTruth(&'static str),

    #[error("degenerate fit: {0}")]
    Degenerate(String),

    #[error("no signal: t̂ = 0, confidence intervals are undefined (use the test-only path)")]
    NoSignal,

    #[error("convention mismatch: {0}")]
    ConventionMismatch(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("non-finite value in replication with seed {seed}: {field}")]
    NonFinite { seed: u64, field: String },

    #[error("unknown preset '{0}'")]
    UnknownPreset(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
