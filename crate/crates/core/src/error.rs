use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("degenerate profile: total arc length is zero")]
    DegenerateProfile,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("profile is self-intersecting: {0}")]
    SelfIntersection(String),

    #[error("sample `{sample}`: point ({x:.3}, {y:.3}) mm falls outside the {width}x{height} canvas")]
    OffCanvas {
        sample: String,
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },

    #[error("label ({dx:.4}, {dy:.4}) mm exceeds the normalization envelope of {limit} mm")]
    LabelOutOfRange { dx: f64, dy: f64, limit: f64 },

    #[error("no correspondences within {max_dist} mm")]
    NoCorrespondences { max_dist: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },

    #[error("{0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("png encode/decode failed: {0}")]
    Png(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
