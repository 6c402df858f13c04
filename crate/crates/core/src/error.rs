// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

pub type Result<T> = std::result::Result<T, YmirError>;

#[derive(Debug, Error)]
pub enum YmirError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("structure error: {0}")]
    Structure(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("parameter error: {0}")]
    Param(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("numeric error{}: {msg}", epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default())]
    Numeric { epoch: Option<usize>, msg: String },

    #[error("stream error: {0}")]
    Stream(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl YmirError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        YmirError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by numerical failure (NaN, divergence).
    pub fn is_numeric(&self) -> bool {
        matches!(self, YmirError::Numeric { .. })
    }
}
