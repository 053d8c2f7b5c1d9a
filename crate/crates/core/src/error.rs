use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on {axis} axis (expected {expected}, got {actual})")]
    Shape {
        op: &'static str,
        axis: String,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: non-finite value at index {index:?}")]
    NonFinite { op: &'static str, index: Vec<usize> },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("no valid pixels to reduce over")]
    NoValidPixels,

    #[error("{op}: image dimensions {height}x{width} are not divisible by {factor}; pad the input first")]
    PaddingRequired {
        op: &'static str,
        height: usize,
        width: usize,
        factor: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Length { expected: usize, actual: usize },

    #[error("layout error: {path} does not belong to the {layout} layout")]
    Layout { layout: &'static str, path: PathBuf },

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, axis: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Shape {
            op,
            axis: axis.into(),
            expected,
            actual,
        }
    }
}

/// Conventional axis name for position `i` in a tensor of rank `rank`.
pub(crate) fn axis_name(rank: usize, i: usize) -> String {
    const NCHW: [&str; 4] = ["batch", "channel", "height", "width"];
    if rank == 4 {
        NCHW[i].to_string()
    } else {
        format!("dim{i}")
    }
}
