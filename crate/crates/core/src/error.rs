use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dimension {dim} exceeds the limit {limit}")]
    DimensionOverflow { dim: usize, limit: usize },
    #[error("integrator failure: {0}")]
    Integrator(String),
    #[error("rank-deficient fit: {0}")]
    RankDeficient(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("missing estimate: {0}")]
    MissingEstimate(String),
    #[error("incomplete observation set: {0}")]
    IncompleteObservations(String),
    #[error("unidentifiable: {0}")]
    Unidentifiable(String),
    #[error("simulator produced out-of-range value {value} for {what}")]
    OutOfRange { what: String, value: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
