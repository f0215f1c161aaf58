//! HTTP chat sessions over a trained model.
//!
//! Endpoints:
//! - `POST /api/sessions` creates a session and returns `{session_id}`.
//! - `POST /api/sessions/{id}/messages` with `{text}` runs one turn.
//! - `GET /api/health` reports the loaded model.
//!
//! Sessions live in memory only and are lost on restart. Errors are JSON
//! `{error, message}` bodies with conventional status codes.

pub mod sessions;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use dialogue_core::dialogue::db::{load_db, load_ontology, DbRecord, Ontology};
use dialogue_core::dialogue::{run_turn, BeliefSpan, DialogueModel, TurnModel};
use dialogue_core::train::load_checkpoint;

pub use sessions::{SessionStore, SharedSession, StoreFull};

pub const PORT_ENV: &str = "E2E_PORT";
pub const CHECKPOINT_ENV: &str = "E2E_CHECKPOINT";
pub const DEFAULT_PORT: u16 = 8080;

/// Everything a request handler needs. Parameters are frozen, so turns of
/// different sessions run concurrently.
pub struct AppState {
    pub model: Arc<dyn TurnModel + Send + Sync>,
    pub db: Arc<Vec<DbRecord>>,
    pub ontology: Arc<Ontology>,
    /// Checksum of the loaded checkpoint.
    pub checkpoint_id: String,
    pub vocab_size: usize,
    pub sessions: SessionStore,
}

#[derive(Clone, Copy, Debug)]
pub struct Limits {
    pub max_sessions: usize,
    pub idle_expiry: Duration,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_sessions: 1024,
            idle_expiry: Duration::from_secs(30 * 60),
        }
    }
}

impl AppState {
    /// Loads a checkpoint plus the database and ontology it was trained for.
    pub fn load(checkpoint: &Path, db: &Path, ontology: &Path, limits: Limits) -> dialogue_core::Result<Self> {
        let (ckpt, checkpoint_id) = load_checkpoint(checkpoint)?;
        let vocab_size = ckpt.vocab.len();
        let model = DialogueModel::new(ckpt.model()?, ckpt.vocab)?;
        Ok(Self {
            model: Arc::new(model),
            db: Arc::new(load_db(db)?),
            ontology: Arc::new(load_ontology(ontology)?),
            checkpoint_id,
            vocab_size,
            sessions: SessionStore::new(limits.max_sessions, limits.idle_expiry),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MessageRequest {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MessageResponse {
    pub session_id: String,
    /// Turns completed in this session, including this one.
    pub turn: u64,
    pub surface_response: String,
    pub delex_response: String,
    pub bspan: BeliefSpan,
    pub db_matches: usize,
    pub db_token: String,
    /// Placeholders that could not be filled from the selected record.
    pub unfilled: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_checkpoint_id: String,
    pub vocab_size: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Full(StoreFull),
    Model(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, error, message) = match &self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, "bad_request", m.clone()),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, "not_found", m.clone()),
            ApiError::Full(_) => (
                StatusCode::SERVICE_UNAVAILABLE,
                "capacity_exceeded",
                "session capacity reached; retry later".to_string(),
            ),
            ApiError::Model(m) => (StatusCode::INTERNAL_SERVER_ERROR, "model_error", m.clone()),
        };
        let body = Json(ErrorBody {
            error: error.to_string(),
            message,
        });
        let mut response = (status, body).into_response();
        if let ApiError::Full(full) = self {
            let secs = full.retry_after.as_secs_f64().ceil().max(1.0) as u64;
            response
                .headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        response
    }
}

async fn create_session(State(state): State<Arc<AppState>>) -> Result<(StatusCode, Json<CreatedSession>), ApiError> {
    let session_id = state.sessions.create().map_err(ApiError::Full)?;
    log::info!("created session {session_id}");
    Ok((StatusCode::CREATED, Json(CreatedSession { session_id })))
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<MessageRequest>, JsonRejection>,
) -> Result<Json<MessageResponse>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let text = req.text.trim().to_string();
    if text.is_empty() {
        return Err(ApiError::BadRequest("text is empty".into()));
    }
    let shared = state
        .sessions
        .get(&id)
        .ok_or_else(|| ApiError::NotFound(format!("no session {id}")))?;
    // Held across the model call so turns of one session run in order.
    let mut guard = shared.lock().await;
    let mut session = guard.clone();
    let worker = state.clone();
    let (session, result) = tokio::task::spawn_blocking(move || {
        let r = run_turn(&mut session, &text, worker.model.as_ref(), &worker.db, &worker.ontology);
        (session, r)
    })
    .await
    .map_err(|e| ApiError::Model(format!("turn worker failed: {e}")))?;
    let result = result.map_err(|e| {
        log::warn!("session {id}: {e}");
        ApiError::Model(e.to_string())
    })?;
    *guard = session;
    Ok(Json(MessageResponse {
        session_id: id,
        turn: guard.turn,
        surface_response: result.surface_response,
        delex_response: result.delex_response.join(" "),
        bspan: result.bspan,
        db_matches: result.db_matches,
        db_token: result.db_token,
        unfilled: result.unfilled,
    }))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_checkpoint_id: state.checkpoint_id.clone(),
        vocab_size: state.vocab_size,
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/messages", post(post_message))
        .route("/api/health", get(health))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
