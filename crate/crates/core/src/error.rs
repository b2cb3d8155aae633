use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("contour order violated on A-line {aline}: lumen {lumen}, IEL {iel}, EEL {eel}")]
    ContourOrderViolation { aline: usize, lumen: f64, iel: f64, eel: f64 },
    #[error("contour {value} on A-line {aline} exceeds radial size {r}")]
    OutOfBounds { aline: usize, value: f64, r: usize },
    #[error("infeasible phantom geometry: {0}")]
    InfeasibleGeometry(String),
    #[error("non-finite loss term `{term}` (value {value})")]
    NonFiniteLoss { term: &'static str, value: f64 },
    #[error("attending-physician weight is non-zero but no critic checkpoint was given")]
    MissingCritic,
    #[error("critic training diverged: {steps} consecutive non-finite steps")]
    Divergence { steps: usize },
    #[error("boundary set is empty")]
    EmptyBoundary,
    #[error("interface `{0}` is absent on every A-line")]
    MissingInterface(&'static str),
    #[error("too few patients for a three-way split: {found}")]
    TooFewPatients { found: usize },
    #[error("radial zoom {factor} would push the outer wall beyond the image")]
    ScaleOutOfRange { factor: f64 },
}
