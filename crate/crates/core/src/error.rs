use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension must be at least 1")]
    ZeroDimension,

    #[error("invalid radius {0}: must be positive and finite")]
    InvalidRadius(f64),

    #[error("mode enumeration exceeds cap of {cap} modes (radius {radius}, d = {d})")]
    ModeCapExceeded { d: usize, radius: f64, cap: usize },

    #[error("invalid covariance profile: {0}")]
    InvalidProfile(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("budget N = {budget} too small: no mode satisfies |i|_2 <= {radius}")]
    BudgetTooSmall { budget: u64, radius: f64 },

    #[error("brute-force search space of {size} points exceeds limit {limit}")]
    SearchSpaceTooLarge { size: u128, limit: u128 },

    #[error("spatial grid of {grid} points per axis cannot resolve frequency {freq} without aliasing")]
    Aliasing { grid: usize, freq: u32 },

    #[error("frequency {freq} outside cached cosine spectrum (max {max})")]
    FrequencyOutOfRange { freq: u32, max: usize },

    #[error("non-finite value at grid step {step}, state mode {mode}")]
    NonFinite { step: usize, mode: usize },

    #[error("coefficient cache has no entry for grid node {0}")]
    MissingCacheEntry(usize),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
