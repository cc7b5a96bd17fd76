//! HTTP classification service over one immutable model.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use gfef_core::checkpoint::FORMAT_VERSION;
use gfef_core::model::{Gfef, Prediction};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyRequest {
    pub series: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityScores {
    pub ts: f64,
    pub img: f64,
    pub exp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub label: usize,
    pub class_probabilities: Vec<f64>,
    pub reliability_scores: ReliabilityScores,
}

impl From<Prediction> for ClassifyResponse {
    fn from(p: Prediction) -> Self {
        ClassifyResponse {
            label: p.label,
            class_probabilities: p.probabilities,
            reliability_scores: ReliabilityScores {
                ts: p.reliability[0],
                img: p.reliability[1],
                exp: p.reliability[2],
            },
        }
    }
}

pub fn model_version(model: &Gfef) -> String {
    format!("ckpt-v{FORMAT_VERSION}-seed{}", model.seed)
}

#[derive(Clone)]
struct AppState {
    model: Option<Arc<Gfef>>,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

/// `model = None` serves 503 on every model-backed route.
pub fn router(model: Option<Arc<Gfef>>, max_body: usize) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/classify", post(classify))
        .route("/classify_batch", post(classify_batch))
        .layer(DefaultBodyLimit::max(max_body))
        .with_state(AppState { model })
}

fn loaded(state: &AppState) -> Result<Arc<Gfef>, ApiError> {
    state
        .model
        .clone()
        .ok_or_else(|| ApiError(StatusCode::SERVICE_UNAVAILABLE, "model not loaded".into()))
}

async fn health(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let m = loaded(&state)?;
    Ok(Json(json!({
        "status": "ok",
        "model_version": model_version(&m),
        "num_classes": m.num_classes(),
        "series_length": m.series_length(),
    })))
}

/// Validation and inference for one request, shared with offline predict.
pub fn classify_one(model: &Gfef, series: &[f64]) -> Result<ClassifyResponse, String> {
    model.predict_series(series).map(Into::into).map_err(|e| e.to_string())
}

async fn run_blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn classify(State(state): State<AppState>, body: Bytes) -> Result<Json<ClassifyResponse>, ApiError> {
    let model = loaded(&state)?;
    let req: ClassifyRequest = serde_json::from_slice(&body).map_err(|e| bad_request(format!("invalid body: {e}")))?;
    let out = run_blocking(move || classify_one(&model, &req.series)).await?;
    out.map(Json).map_err(bad_request)
}

async fn classify_batch(State(state): State<AppState>, body: Bytes) -> Result<Json<Vec<ClassifyResponse>>, ApiError> {
    let model = loaded(&state)?;
    let reqs: Vec<ClassifyRequest> =
        serde_json::from_slice(&body).map_err(|e| bad_request(format!("invalid body: {e}")))?;
    let out = run_blocking(move || {
        reqs.iter()
            .enumerate()
            .map(|(i, r)| classify_one(&model, &r.series).map_err(|e| format!("item {i}: {e}")))
            .collect::<Result<Vec<_>, String>>()
    })
    .await?;
    out.map(Json).map_err(bad_request)
}

/// Binds `0.0.0.0:port` and serves until the process ends.
pub async fn serve(model: Arc<Gfef>, port: u16, max_body: usize) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Some(model), max_body)).await?;
    Ok(())
}
