//! JSON API over the annotation store, plus optional static files for the UI.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tower_http::services::ServeDir;

use recast::annotation::{
    AnnotationError, AnnotationReport, AnnotationStore, AnnotationSubmission, Condition, SubmissionInput, TaskView,
};

type Shared = Arc<Mutex<AnnotationStore>>;

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        Self {
            status: StatusCode::from_u16(e.status_code()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}", self.message);
        }
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

fn bad_request(message: impl Into<String>) -> ApiError {
    ApiError {
        status: StatusCode::BAD_REQUEST,
        message: message.into(),
    }
}

#[derive(Debug, Deserialize)]
pub struct NextQuery {
    condition: Option<String>,
    annotator: Option<String>,
}

fn lock(store: &Shared) -> std::sync::MutexGuard<'_, AnnotationStore> {
    // a panic mid-request leaves the store consistent: the journal append
    // happens before any in-memory change
    store.lock().unwrap_or_else(|p| p.into_inner())
}

async fn next_task(State(store): State<Shared>, Query(q): Query<NextQuery>) -> Result<Json<TaskView>, ApiError> {
    let condition = q
        .condition
        .as_deref()
        .filter(|c| !c.is_empty())
        .map(str::parse::<Condition>)
        .transpose()
        .map_err(bad_request)?;
    let mut s = lock(&store);
    let task = s.next(condition, q.annotator.as_deref(), Instant::now())?;
    Ok(Json(TaskView::from(task)))
}

async fn get_task(State(store): State<Shared>, Path(id): Path<String>) -> Result<Json<TaskView>, ApiError> {
    let s = lock(&store);
    Ok(Json(TaskView::from(s.get(&id)?)))
}

async fn submit(
    State(store): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<SubmissionInput>, JsonRejection>,
) -> Result<Json<AnnotationSubmission>, ApiError> {
    let Json(input) = body.map_err(|e| bad_request(e.body_text()))?;
    let mut s = lock(&store);
    Ok(Json(s.submit(&id, input)?))
}

async fn report(State(store): State<Shared>) -> Json<AnnotationReport> {
    Json(lock(&store).report())
}

pub fn router(store: AnnotationStore, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{id}", get(get_task))
        .route("/api/tasks/{id}/submission", post(submit))
        .route("/api/report", get(report))
        .with_state(Arc::new(Mutex::new(store)));
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
