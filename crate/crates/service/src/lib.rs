//! HTTP front end for interactive segmentation sessions.
//!
//! A client uploads an image, then sends clicks one at a time in stored
//! (preprocessed) image coordinates. Once both a foreground and a
//! background click exist, every click returns a fresh binary mask.

pub mod session;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hfn_core::{checkpoint, Hfn, HfnError};
use serde_json::json;

pub use session::{ClickLabel, ClickResponse, LabeledClick, ServiceError, SessionStore, Snapshot, DEFAULT_TTL};

/// Largest accepted upload.
pub const MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
    /// Reported by `/healthz`.
    pub checkpoint: String,
}

impl AppState {
    pub fn new(store: SessionStore, checkpoint: impl Into<String>) -> Self {
        AppState { store: Arc::new(store), checkpoint: checkpoint.into() }
    }

    pub fn from_checkpoint(path: &Path, ttl: Duration) -> Result<Self, HfnError> {
        let ck = checkpoint::load(path)?;
        let store = SessionStore::new(Hfn::new(ck.config)?, ck.params, ttl)?;
        Ok(AppState::new(store, path.display().to_string()))
    }
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ServiceError::BadImage(_) | ServiceError::BadRequest(_) | ServiceError::OutOfBounds { .. } => {
                StatusCode::BAD_REQUEST
            }
            ServiceError::DuplicateClick { .. } | ServiceError::NothingToUndo => StatusCode::CONFLICT,
            ServiceError::Inference(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "checkpoint": state.checkpoint }))
}

async fn create_session(State(state): State<AppState>, mut multipart: Multipart) -> Result<Response, ServiceError> {
    let mut bytes = None;
    while let Some(field) = multipart.next_field().await.map_err(|e| ServiceError::BadRequest(e.to_string()))? {
        let is_image = field.name() == Some("image") || field.file_name().is_some();
        if is_image {
            bytes = Some(field.bytes().await.map_err(|e| ServiceError::BadRequest(e.to_string()))?);
            break;
        }
    }
    let bytes = bytes.ok_or_else(|| ServiceError::BadRequest("multipart body has no image field".into()))?;
    let store = state.store.clone();
    let id = tokio::task::spawn_blocking(move || store.create(&bytes))
        .await
        .map_err(|e| ServiceError::Inference(e.to_string()))??;
    Ok(Json(json!({ "session_id": id })).into_response())
}

async fn add_click(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<LabeledClick>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<ClickResponse>, ServiceError> {
    let Json(click) = body.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    Ok(Json(state.store.add_click(&id, click).await?))
}

async fn undo(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<ClickResponse>, ServiceError> {
    Ok(Json(state.store.undo(&id).await?))
}

async fn snapshot(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<Snapshot>, ServiceError> {
    Ok(Json(state.store.snapshot(&id).await?))
}

async fn delete_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<StatusCode, ServiceError> {
    state.store.delete(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/v1/sessions", post(create_session))
        .route("/api/v1/sessions/{id}", get(snapshot).delete(delete_session))
        .route("/api/v1/sessions/{id}/clicks", post(add_click))
        .route("/api/v1/sessions/{id}/undo", post(undo))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

/// Serve until Ctrl-C, sweeping idle sessions once a minute.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let store = state.store.clone();
    let period = store.ttl().min(Duration::from_secs(60)).max(Duration::from_secs(1));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = store.sweep();
            if n > 0 {
                tracing::info!(expired = n, "dropped idle sessions");
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
