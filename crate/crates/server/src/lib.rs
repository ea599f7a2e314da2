//! REST API over the job store: video upload, job polling, reports and the
//! clause registry.
//!
//! Uploaded videos are streamed to `<data_dir>/videos/`, checked for
//! decodability and handed to a background [`JobRunner`]. Handlers only read
//! the store, so polling never changes job state.

mod config;
mod error;
mod routes;

use std::sync::Arc;

use axum::http::{header, HeaderValue, Method};
use axum::Router;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::trace::TraceLayer;

use monitorvlm_core::pipeline::{JobRunner, JobStore, Pipeline};
use monitorvlm_core::registry::ClauseRegistry;

pub use config::{ApiConfig, DEFAULT_MAX_UPLOAD_BYTES};
pub use error::{ApiError, ServerError};
pub use routes::{JobSummary, ProgressView};

/// Shared handler state.
pub struct AppState {
    runner: JobRunner,
    registry: ClauseRegistry,
    max_upload_bytes: u64,
    auth_token: Option<String>,
}

impl AppState {
    /// Opens the job store under `config.data_dir` and serves jobs with `pipeline`.
    pub fn new(config: &ApiConfig, pipeline: Pipeline) -> Result<AppState, ServerError> {
        config.validate()?;
        let store = Arc::new(JobStore::open(&config.data_dir)?);
        check_writable(&store)?;
        let registry = pipeline.registry().clone();
        Ok(AppState {
            runner: JobRunner::new(store, Arc::new(pipeline), config.max_jobs),
            registry,
            max_upload_bytes: config.max_upload_bytes,
            auth_token: config.auth_token.clone(),
        })
    }

    pub fn store(&self) -> &JobStore {
        self.runner.store()
    }

    pub fn registry(&self) -> &ClauseRegistry {
        &self.registry
    }
}

fn check_writable(store: &JobStore) -> Result<(), ServerError> {
    let probe = store.data_dir().join(".write-probe");
    std::fs::write(&probe, b"")
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|e| ServerError::Config(format!("data_dir {} is not writable: {e}", store.data_dir().display())))
}

fn cors_layer(origins: &[String]) -> CorsLayer {
    let allow = if origins.is_empty() {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([header::AUTHORIZATION, header::CONTENT_TYPE, header::RANGE])
        .expose_headers([
            header::CONTENT_RANGE,
            header::ACCEPT_RANGES,
            header::CONTENT_LENGTH,
            header::LOCATION,
        ])
}

/// The full application router for a prepared state.
pub fn router(state: Arc<AppState>, cors_origins: &[String]) -> Router {
    routes::routes(state)
        .layer(TraceLayer::new_for_http())
        .layer(cors_layer(cors_origins))
}

/// Builds the pipeline described by `config` and returns the router.
pub fn app(config: &ApiConfig) -> Result<Router, ServerError> {
    config.validate()?;
    let pipeline = Pipeline::from_config(config.pipeline.clone())?;
    let state = Arc::new(AppState::new(config, pipeline)?);
    Ok(router(state, &config.cors_origins))
}

/// Binds `config.bind` and serves until Ctrl-C.
pub async fn serve(config: ApiConfig) -> Result<(), ServerError> {
    let app = app(&config)?;
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
