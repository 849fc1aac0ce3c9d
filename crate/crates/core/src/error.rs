use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index:?} out of bounds for dims {dims:?}")]
    Bounds { index: [usize; 3], dims: [usize; 3] },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("degenerate factor: {0}")]
    DegenerateFactor(String),

    #[error("natural parameter {x} exceeds the cap {cap}")]
    NaturalParameterOverflow { x: f64, cap: f64 },

    #[error("value {y} is outside the support of the {family} family")]
    Support { family: &'static str, y: f64 },

    #[error("probability {0} outside (0, 1)")]
    ProbabilityRange(f64),

    #[error("no observed entries")]
    NoData,

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("complete separation in logistic fit")]
    Separation,

    #[error("response has a single class")]
    DegenerateResponse,

    #[error("design is collinear (constant covariate)")]
    CollinearDesign,

    #[error("no missing entries to evaluate")]
    NoMissingEntries,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("labels contain a single class")]
    DegenerateLabels,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("duplicate entry ({i},{j},{k})")]
    Duplicate { i: usize, j: usize, k: usize },

    #[error("unsupported schema version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
