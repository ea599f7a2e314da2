use std::net::SocketAddr;
use std::path::PathBuf;

use axum::http::HeaderValue;
use serde::{Deserialize, Serialize};

use monitorvlm_core::pipeline::PipelineConfig;

use crate::ServerError;

pub const DEFAULT_MAX_UPLOAD_BYTES: u64 = 512 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApiConfig {
    pub bind: SocketAddr,
    pub max_upload_bytes: u64,
    pub data_dir: PathBuf,
    pub pipeline: PipelineConfig,
    /// When set, every `/api` route except the health check requires
    /// `Authorization: Bearer <token>` (or `?token=<token>` for media links).
    pub auth_token: Option<String>,
    /// Jobs processed at the same time. Further uploads wait for a slot.
    pub max_jobs: usize,
    /// Allowed browser origins. Empty allows any origin.
    pub cors_origins: Vec<String>,
}

impl Default for ApiConfig {
    fn default() -> Self {
        ApiConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            max_upload_bytes: DEFAULT_MAX_UPLOAD_BYTES,
            data_dir: PathBuf::from("data"),
            pipeline: PipelineConfig::default(),
            auth_token: None,
            max_jobs: 1,
            cors_origins: Vec::new(),
        }
    }
}

impl ApiConfig {
    pub fn validate(&self) -> Result<(), ServerError> {
        if self.max_upload_bytes == 0 {
            return Err(ServerError::Config("max_upload_bytes must be positive".into()));
        }
        if self.max_jobs == 0 {
            return Err(ServerError::Config("max_jobs must be at least 1".into()));
        }
        if matches!(&self.auth_token, Some(t) if t.trim().is_empty()) {
            return Err(ServerError::Config("auth_token is set but empty".into()));
        }
        for origin in &self.cors_origins {
            HeaderValue::from_str(origin)
                .map_err(|_| ServerError::Config(format!("invalid CORS origin {origin:?}")))?;
        }
        self.pipeline.validate()?;
        Ok(())
    }
}
