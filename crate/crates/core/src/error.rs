use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stages named in job failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sampling,
    Detector,
    Magnifier,
    Filter,
    Vlm,
    Report,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Sampling => "sampling",
            Stage::Detector => "detector",
            Stage::Magnifier => "magnifier",
            Stage::Filter => "filter",
            Stage::Vlm => "vlm",
            Stage::Report => "report",
        };
        f.write_str(name)
    }
}

/// Classifies a backend failure; only transport-level failures are retried.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendErrorKind {
    Transport,
    Timeout,
    Status(u16),
    Protocol,
}

impl BackendErrorKind {
    pub fn is_retryable(self) -> bool {
        match self {
            BackendErrorKind::Transport | BackendErrorKind::Timeout => true,
            BackendErrorKind::Status(code) => code >= 500,
            BackendErrorKind::Protocol => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// Input did not match the expected file schema.
    #[error("schema error at {path} (line {line}, column {column}): {message}")]
    Schema {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("provider error for {subject}: {message}")]
    Provider { subject: String, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("could not parse verdicts from model output")]
    Parse { raw: String },

    #[error("backend error ({kind:?}) from {endpoint}: {message}")]
    Backend {
        kind: BackendErrorKind,
        endpoint: String,
        message: String,
    },

    #[error("ingestion error at frame {frame}: {message}")]
    Ingestion { frame: u64, message: String },

    #[error("mask saturation: reached {achieved:.4} of requested {requested:.4} after {proposals} proposals")]
    Saturation {
        achieved: f64,
        requested: f64,
        proposals: usize,
    },

    #[error("training error: {0}")]
    Training(String),

    #[error("{stage} stage failed on triplet {triplet}: {source}")]
    Stage {
        stage: Stage,
        triplet: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn at_stage(self, stage: Stage, triplet: usize) -> Self {
        Error::Stage {
            stage,
            triplet,
            source: Box::new(self),
        }
    }

    /// True when the failure is caused by bad caller input rather than the runtime environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Schema { .. } | Error::Validation(_) | Error::Shape { .. } | Error::Json(_)
        )
    }

    pub(crate) fn from_json_path(err: serde_path_to_error::Error<serde_json::Error>) -> Self {
        let path = err.path().to_string();
        let inner = err.into_inner();
        Error::Schema {
            path,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    }
}

/// Parses JSON text into `T`, reporting the failing field path and position.
pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(Error::from_json_path)?;
    de.end().map_err(|e| Error::Schema {
        path: ".".into(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Ok(value)
}
