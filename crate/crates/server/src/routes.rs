use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;
use tokio::io::AsyncWriteExt;
use tower::ServiceExt;
use tower_http::services::ServeFile;

use monitorvlm_core::pipeline::{Job, JobError, JobState};
use monitorvlm_core::Error as CoreError;

use crate::{ApiError, AppState};

/// Allowance for multipart boundaries and part headers on top of the file itself.
const MULTIPART_OVERHEAD: u64 = 64 * 1024;

type Shared = Arc<AppState>;

pub(crate) fn routes(state: Shared) -> Router {
    let api = Router::new()
        .route("/api/videos", post(upload))
        .route("/api/videos/{id}/raw", get(raw_video))
        .route("/api/jobs", get(list_jobs))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/reports/{id}", get(get_report))
        .route("/api/clauses", get(clauses))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(DefaultBodyLimit::disable());
    Router::new()
        .route("/api/health", get(|| async { Json(json!({"status": "ok"})) }))
        .merge(api)
        .with_state(state)
}

fn token_matches(req: &Request, expected: &str) -> bool {
    let bearer = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == expected);
    // Media elements cannot set headers, so a query token is accepted too.
    let query = req
        .uri()
        .query()
        .is_some_and(|q| q.split('&').any(|pair| pair.strip_prefix("token=") == Some(expected)));
    bearer || query
}

async fn require_token(State(state): State<Shared>, req: Request, next: Next) -> Response {
    if let Some(expected) = &state.auth_token {
        if !token_matches(&req, expected) {
            let mut resp = ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response();
            resp.headers_mut()
                .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
            return resp;
        }
    }
    next.run(req).await
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProgressView {
    pub done: usize,
    pub total: usize,
    pub fraction: f64,
}

/// What `GET /api/jobs/{id}` returns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobSummary {
    pub id: String,
    pub state: JobState,
    pub progress: ProgressView,
    pub error: Option<JobError>,
    pub report_url: Option<String>,
    pub video_url: String,
    pub created_at: String,
    pub updated_at: String,
}

impl From<Job> for JobSummary {
    fn from(job: Job) -> JobSummary {
        JobSummary {
            report_url: (job.state == JobState::Done).then(|| format!("/api/reports/{}", job.id)),
            video_url: format!("/api/videos/{}/raw", job.id),
            progress: ProgressView {
                done: job.progress.done,
                total: job.progress.total,
                fraction: job.progress.fraction(),
            },
            id: job.id,
            state: job.state,
            error: job.error,
            created_at: job.created_at,
            updated_at: job.updated_at,
        }
    }
}

fn find_job(state: &AppState, id: &str) -> Result<Job, ApiError> {
    state.store().get(id).ok_or_else(|| ApiError::not_found(format!("job {id}")))
}

async fn get_job(State(state): State<Shared>, Path(id): Path<String>) -> Result<Json<JobSummary>, ApiError> {
    Ok(Json(find_job(&state, &id)?.into()))
}

async fn list_jobs(State(state): State<Shared>) -> Json<Vec<JobSummary>> {
    Json(state.store().list().into_iter().map(JobSummary::from).collect())
}

async fn get_report(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    match state.store().report_bytes(&id) {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response()),
        Err(CoreError::State(_)) => {
            let job = find_job(&state, &id)?;
            let body = json!({
                "error": format!("report for job {id} is not available yet"),
                "state": job.state,
            });
            Ok((StatusCode::CONFLICT, Json(body)).into_response())
        }
        Err(other) => Err(other.into()),
    }
}

async fn clauses(State(state): State<Shared>) -> Result<Response, ApiError> {
    let body = state.registry().to_json_string()?;
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

async fn raw_video(State(state): State<Shared>, Path(id): Path<String>, req: Request) -> Result<Response, ApiError> {
    let job = find_job(&state, &id)?;
    let resp = ServeFile::new(&job.video_ref)
        .oneshot(req)
        .await
        .map_err(ApiError::internal)?;
    Ok(resp.map(Body::new))
}

/// Keeps a short alphanumeric extension from the client's file name.
fn extension_of(file_name: Option<&str>) -> String {
    file_name
        .and_then(|n| FsPath::new(n).extension())
        .and_then(|e| e.to_str())
        .filter(|e| !e.is_empty() && e.len() <= 8 && e.chars().all(|c| c.is_ascii_alphanumeric()))
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_else(|| "bin".into())
}

fn too_large(limit: u64) -> ApiError {
    ApiError::new(
        StatusCode::PAYLOAD_TOO_LARGE,
        format!("upload exceeds the limit of {limit} bytes"),
    )
}

fn bad_multipart(err: axum::extract::multipart::MultipartError) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, "malformed multipart body").with_detail(err.body_text())
}

/// Removes a partially written upload unless disarmed.
struct PartialFile(Option<PathBuf>);

impl Drop for PartialFile {
    fn drop(&mut self) {
        if let Some(path) = self.0.take() {
            let _ = std::fs::remove_file(path);
        }
    }
}

async fn upload(State(state): State<Shared>, headers: HeaderMap, mut multipart: Multipart) -> Result<Response, ApiError> {
    let limit = state.max_upload_bytes;
    let declared = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    if declared.is_some_and(|n| n > limit.saturating_add(MULTIPART_OVERHEAD)) {
        return Err(too_large(limit));
    }

    let id = uuid::Uuid::new_v4().to_string();
    let mut saved = None;
    while let Some(mut field) = multipart.next_field().await.map_err(bad_multipart)? {
        if field.name() != Some("file") {
            continue;
        }
        let path = state
            .store()
            .videos_dir()
            .join(format!("{id}.{}", extension_of(field.file_name())));
        let mut guard = PartialFile(Some(path.clone()));
        let mut file = tokio::fs::File::create(&path).await.map_err(ApiError::internal)?;
        let mut written = 0u64;
        while let Some(chunk) = field.chunk().await.map_err(bad_multipart)? {
            written += chunk.len() as u64;
            if written > limit {
                return Err(too_large(limit));
            }
            file.write_all(&chunk).await.map_err(ApiError::internal)?;
        }
        file.flush().await.map_err(ApiError::internal)?;
        drop(file);
        guard.0 = None;
        saved = Some(path);
        break;
    }
    let path = saved.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "multipart field \"file\" is missing"))?;

    let probe_path = path.clone();
    let probed = tokio::task::spawn_blocking(move || monitorvlm_core::video::probe(&probe_path))
        .await
        .map_err(ApiError::internal)?;
    if let Err(err) = probed {
        let _ = tokio::fs::remove_file(&path).await;
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "video could not be decoded").with_detail(err.to_string()));
    }

    let (job, _handle) = state.runner.submit(&id, &path)?;
    tracing::info!(job = %job.id, video = %path.display(), "job queued");
    let location = format!("/api/jobs/{}", job.id);
    Ok((
        StatusCode::ACCEPTED,
        [(header::LOCATION, location.clone())],
        Json(json!({ "job_id": job.id, "status_url": location })),
    )
        .into_response())
}
