use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: parse error at byte {offset} (line {line}, column {column}): {msg}")]
    Parse {
        path: PathBuf,
        offset: usize,
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("joint {joint} ('{name}') projects behind the camera (z = {z})")]
    Projection { joint: usize, name: String, z: f64 },

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("fitting diverged at iteration {iteration}: {trace}")]
    Diverged { iteration: usize, trace: String },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("checkpoint config mismatch (stored {stored}, requested {requested}):\n{diff}")]
    ConfigMismatch {
        stored: String,
        requested: String,
        diff: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("safetensors: {0}")]
    SafeTensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
