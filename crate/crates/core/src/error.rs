use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("metric is not positive definite at {x:?} (min eigenvalue {min_eig:e})")]
    NotSpd { x: Vec<f64>, min_eig: f64 },
    #[error("geodesic from {x:?} did not exit within length {t_max}")]
    Trapped { x: Vec<f64>, t_max: f64 },
    #[error("geodesic left the coordinate box at {x:?}")]
    LeftChart { x: Vec<f64> },
    #[error("boundary defining function is degenerate at {x:?}")]
    DegenerateBoundary { x: Vec<f64> },
    #[error("transport step too large: step-doubling discrepancy {discrepancy:e}")]
    StepTooLarge { discrepancy: f64 },
    #[error("fundamental solution is singular (|det| = {det:e})")]
    SingularU { det: f64 },
    #[error("gauge transformation is singular at {x:?}")]
    SingularGauge { x: Vec<f64> },
    #[error("level set {level} is not strictly convex (min restricted eigenvalue {lambda1:e})")]
    NotStrictlyConvexLevels { level: f64, lambda1: f64 },
    #[error("boundary is not strictly convex at {x:?} (margin {margin:e})")]
    NotConvexAt { x: Vec<f64>, margin: f64 },
    #[error("no quadratic correction admits collar depth {c}")]
    CollarTooDeep { c: f64 },
    #[error("constraint set is empty at the sampled resolution")]
    DegenerateDirectionSet,
    #[error("solver did not converge: residual reduced by {reduction:.3e} in {iterations} iterations")]
    NoConvergence { iterations: usize, reduction: f64 },
    #[error("layer {index} failed: {reason}")]
    LayerFailed { index: usize, reason: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used in error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotSpd { .. } => "NotSPD",
            Error::Trapped { .. } => "Trapped",
            Error::LeftChart { .. } => "LeftChart",
            Error::DegenerateBoundary { .. } => "DegenerateBoundary",
            Error::StepTooLarge { .. } => "StepTooLarge",
            Error::SingularU { .. } => "SingularU",
            Error::SingularGauge { .. } => "SingularGauge",
            Error::NotStrictlyConvexLevels { .. } => "NotStrictlyConvexLevels",
            Error::NotConvexAt { .. } => "NotConvexAt",
            Error::CollarTooDeep { .. } => "CollarTooDeep",
            Error::DegenerateDirectionSet => "DegenerateDirectionSet",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::LayerFailed { .. } => "LayerFailed",
            Error::Invalid(_) => "Invalid",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
