use thiserror::Error;

/// Errors raised across the estimator, analysis and dataset layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not a rotation: orthonormality residual {residual:.3e}, det {det:.6}")]
    NotARotation { residual: f64, det: f64 },

    #[error("rotation axis must be unit norm, got norm {0:.12}")]
    NonUnitAxis(f64),

    #[error("matrix is not skew-symmetric: symmetric part norm {0:.3e}")]
    NotSkew(f64),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("vector length {0} is not a multiple of 3")]
    BadLength(usize),

    #[error("degenerate input: norm {0:.3e} below singularity threshold")]
    DegenerateInput(f64),

    #[error("landmark {landmark} coincides with a camera center (distance {distance:.3e} m)")]
    SingularMeasurement { landmark: usize, distance: f64 },

    #[error("observation modality {got} does not match sensor rig {rig}")]
    ModalityMismatch { got: &'static str, rig: &'static str },

    #[error("non-finite value during {0}")]
    NonFinite(&'static str),

    #[error("covariance lost positive definiteness (shifted Cholesky failed)")]
    CovarianceCollapse,

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
