use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Height/width constraint violated (odd size, not divisible by a factor, ...).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Channel count or grid shape mismatch between operands.
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("homography is not invertible (det = {det:e})")]
    Singular { det: f64 },

    #[error("format error in {path}: {msg}", path = .path.as_deref().map(|p| p.display().to_string()).unwrap_or_else(|| "<memory>".into()))]
    Format { path: Option<PathBuf>, msg: String },

    #[error("first trajectory frame is not the identity (max deviation {deviation:e})")]
    ReferenceFrame { deviation: f64 },

    #[error("image has no usable gradient energy (variance {variance:e})")]
    FlatImage { variance: f64 },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("dense oracle limited to n <= {max}, got n = {n}")]
    OracleScale { n: usize, max: usize },

    #[error("timestep {t} has noise coefficient {beta:e}, too small to divide by")]
    Timestep { t: usize, beta: f64 },

    #[error("VSD weight denominator {denominator:e} is below the overflow guard")]
    WeightOverflow { denominator: f64 },

    #[error("optimization diverged at iteration {iteration} (loss {loss:e})")]
    Divergence {
        iteration: usize,
        loss: f64,
        trace: Vec<crate::score_distill::TraceRow>,
    },

    #[error("channel {channel} has no fused samples")]
    InsufficientCoverage { channel: usize },

    #[error("inverse FFT left an imaginary residue of {residue:e}")]
    NonHermitian { residue: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: Option<&std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.map(|p| p.to_path_buf()),
            msg: msg.into(),
        }
    }
}
