use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("unstable dynamics: time constant {tau} s must exceed step {dt} s")]
    Stability { tau: f64, dt: f64 },

    #[error("echo delay {delay_s:.3e} s outside frame of {frame_s:.3e} s")]
    Range { delay_s: f64, frame_s: f64 },

    #[error("interface detection failed: {0}")]
    Detection(String),

    #[error("thickness tracking produced no valid frame out of {0}")]
    EmptyTrace(usize),

    #[error("stream alignment error: {0}")]
    Alignment(String),

    #[error("coverage gaps at output samples {0:?}")]
    Coverage(Vec<(usize, usize)>),

    #[error("period segmentation failed: {0}")]
    Segmentation(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("non-finite gradient in tensor `{0}`")]
    NonFinite(String),

    #[error("{}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data { path: path.into(), msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures caused by user input data or broken contracts, as
    /// opposed to usage mistakes.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_) | Error::Param(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
