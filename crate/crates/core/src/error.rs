use std::path::PathBuf;

/// Errors raised anywhere in the reconstruction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("undistortion did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergent { residual: f64, iterations: usize },

    #[error("inverse depth must be positive, got {0}")]
    NonPositiveDepth(f64),

    #[error("point is behind the camera (depth {0:e})")]
    BehindCamera(f64),

    #[error("image {width}x{height} is too small for window radius {radius}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        radius: usize,
    },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("only {found} complete tracks survived, need at least {required}")]
    TooFewTracks { found: usize, required: usize },

    #[error("rotation estimate is degenerate (normal matrix condition {0:e})")]
    Degenerate(f64),

    #[error("translation baseline indistinguishable from zero (sigma1/|M| = {0:e})")]
    DegenerateMotion(f64),

    #[error("inverse-depth sign is ambiguous (median {0:e})")]
    SignAmbiguous(f64),

    #[error("normal equations unsolvable even at damping {0:e}")]
    NumericalFailure(f64),

    #[error("bad plane range [{min}, {max}] with {count} planes")]
    BadRange { min: f64, max: f64, count: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("failed to decode {path}: {reason}")]
    DecodeError { path: PathBuf, reason: String },

    #[error("need at least 2 frames, found {0}")]
    TooFewFrames(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DegenerateMotion(_) | Error::Degenerate(_) | Error::SignAmbiguous(_) => 3,
            Error::NumericalFailure(_) | Error::NonConvergent { .. } | Error::BehindCamera(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
