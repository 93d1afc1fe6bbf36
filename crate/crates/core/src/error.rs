use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown array `{0}` (see `arrays-list`)")]
    UnknownArray(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("spherical harmonic order {0} exceeds the supported ceiling of {max}", max = crate::sh::MAX_ORDER)]
    UnsupportedOrder(u32),

    #[error("malformed container: {0}")]
    Format(String),

    /// Filter design failed at one or more frequencies; every failing bin is listed.
    #[error("solver failed at {} frequencies (first: bin {} / {:.1} Hz)", .0.len(), .0[0].0, .0[0].1)]
    Solver(Vec<(usize, f64)>),

    #[error("frequency grids do not align: {0}")]
    Alignment(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("reference signal is identically zero")]
    UndefinedReference,

    #[error("network weights: {0}")]
    Weights(String),

    #[error("optimizer diverged at iteration {0} (non-finite loss); reduce the step size")]
    Divergence(usize),

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Solver(_) | Error::Divergence(_))
    }
}
