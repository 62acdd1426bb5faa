use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite entries in {0}")]
    NonFinite(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("post-selection too unlikely: N² = {norm_sq:.3e} below floor {floor:.1e}")]
    PostselectionTooUnlikely { norm_sq: f64, floor: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("memory guard exceeded: {0}")]
    MemoryGuard(String),
    #[error("assumption violated at {location}: {what}")]
    AssumptionViolated { location: String, what: String },
}

pub type Result<T> = std::result::Result<T, Error>;
