//! REST endpoints consumed by the dashboard.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Duration, Utc};
use serde::Deserialize;
use serde_json::json;

use mindstream::extraction::Label;

use crate::engine::{Engine, EngineError, UtteranceInput};

pub const LABEL_HEADER: &str = "x-label";

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub token: Option<Arc<str>>,
}

pub struct ApiError(StatusCode, String);

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::BadRequest(_) => StatusCode::BAD_REQUEST,
            EngineError::NotFound(_) => StatusCode::NOT_FOUND,
            EngineError::Conflict(_) => StatusCode::CONFLICT,
            EngineError::Extraction(_) => StatusCode::BAD_GATEWAY,
            EngineError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(message: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, message.into())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/users/{user_id}/utterances", post(add_utterance))
        .route("/users/{user_id}/sessions/current/close", post(close_session))
        .route("/users/{user_id}/trajectory", get(user_trajectory))
        .route("/users/{user_id}/latest", get(latest))
        .route("/metrics", get(metrics))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .route("/health", get(|| async { "ok" }))
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(expected) = &state.token {
        let supplied = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if supplied != Some(expected.as_ref()) {
            return ApiError(StatusCode::UNAUTHORIZED, "missing or invalid bearer token".into()).into_response();
        }
    }
    next.run(request).await
}

async fn add_utterance(
    State(state): State<AppState>,
    Path(user_id): Path<String>,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let input: UtteranceInput =
        serde_json::from_slice(&body).map_err(|e| bad_request(format!("invalid utterance: {e}")))?;
    let engine = Arc::clone(&state.engine);
    let outcome = tokio::task::spawn_blocking(move || engine.add_utterance(&user_id, input))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(outcome))
}

async fn close_session(
    State(state): State<AppState>,
    Path(user_id): Path<String>,
    headers: HeaderMap,
) -> Result<impl IntoResponse, ApiError> {
    let label = match headers.get(LABEL_HEADER) {
        None => None,
        Some(v) => {
            let text = v.to_str().map_err(|_| bad_request("X-Label is not text"))?;
            Some(text.parse::<Label>().map_err(bad_request)?)
        }
    };
    let closed = state.engine.close_current(&user_id, label).await?;
    Ok(Json(closed))
}

#[derive(Debug, Deserialize)]
struct TrajectoryQuery {
    /// Window length in days; zero or negative returns the whole history.
    days: Option<f64>,
    now: Option<DateTime<Utc>>,
}

async fn user_trajectory(
    State(state): State<AppState>,
    Path(user_id): Path<String>,
    Query(query): Query<TrajectoryQuery>,
) -> Result<impl IntoResponse, ApiError> {
    let days = query.days.unwrap_or(14.0);
    if !days.is_finite() {
        return Err(bad_request("days must be finite"));
    }
    let window = (days > 0.0).then(|| Duration::milliseconds((days * 86_400_000.0).round() as i64));
    let view = state
        .engine
        .trajectory(&user_id, window, query.now.unwrap_or_else(Utc::now))?;
    Ok(Json(view))
}

async fn latest(State(state): State<AppState>, Path(user_id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(state.engine.latest(&user_id)?))
}

async fn metrics(State(state): State<AppState>) -> impl IntoResponse {
    Json(state.engine.metrics())
}
