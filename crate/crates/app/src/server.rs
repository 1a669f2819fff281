//! HTTP service over an immutable model snapshot.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;
use ttg_core::road::{RoadGraph, TrafficSnapshot};
use ttg_core::scenario::Dataset;

use crate::api::{presets, timed_generate, GenerateRequest, Loaded};
use crate::error::{invalid, runtime, AppError, AppResult};
use crate::render::{render_map, Channel};

pub struct AppState {
    pub loaded: Loaded,
    /// caps concurrent sampling loops
    pub workers: Semaphore,
}

impl AppState {
    /// Load `ckpt` and check it against the dataset in `data_dir`.
    pub fn open(ckpt: &Path, data_dir: &Path, workers: usize) -> AppResult<Self> {
        let loaded = Loaded::open(ckpt)?;
        let ds = Dataset::load(data_dir)?;
        loaded.check_dataset(&ds)?;
        Ok(Self::new(loaded, workers))
    }

    pub fn new(loaded: Loaded, workers: usize) -> Self {
        Self {
            loaded,
            workers: Semaphore::new(workers.max(1)),
        }
    }

    fn graph(&self) -> &RoadGraph {
        self.loaded.graph()
    }
}

type Shared = Arc<AppState>;

#[derive(Debug, Serialize)]
struct ErrorBody<'a> {
    error: ErrorDetail<'a>,
}

#[derive(Debug, Serialize)]
struct ErrorDetail<'a> {
    kind: &'a str,
    message: String,
}

fn error_response(status: StatusCode, kind: &str, message: String) -> Response {
    (status, Json(ErrorBody { error: ErrorDetail { kind, message } })).into_response()
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let status = match self {
            AppError::Validation(_) => StatusCode::BAD_REQUEST,
            AppError::Runtime(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        error_response(status, self.kind(), self.to_string())
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> AppResult<T> {
    serde_json::from_slice(body).map_err(|e| invalid(format!("malformed request body: {e}")))
}

async fn health(State(s): State<Shared>) -> Response {
    Json(json!({
        "status": "ok",
        "model_hash": s.loaded.model_hash,
        "data_hash": s.loaded.data_hash(),
        "n_roads": s.loaded.n_roads(),
        "timesteps": s.loaded.model.schedule.steps(),
    }))
    .into_response()
}

async fn network(State(s): State<Shared>) -> Response {
    Json(s.graph()).into_response()
}

async fn vocab(State(s): State<Shared>) -> Response {
    let v = &s.loaded.model.vocab;
    Json(json!({ "size": v.size, "tokens": v.tokens })).into_response()
}

async fn preset_list(State(s): State<Shared>) -> Response {
    Json(json!({ "presets": presets(s.graph()) })).into_response()
}

/// Run a generation on the blocking pool once a worker slot is free.
async fn run_generate(s: &Shared, req: GenerateRequest) -> AppResult<(crate::api::GenerateResponse, f64)> {
    let _permit = s.workers.acquire().await.map_err(|e| runtime(e.to_string()))?;
    let state = Arc::clone(s);
    tokio::task::spawn_blocking(move || timed_generate(&state.loaded, &req))
        .await
        .map_err(|e| runtime(format!("generation task failed: {e}")))?
}

async fn generate(State(s): State<Shared>, body: Bytes) -> Result<Response, AppError> {
    let req: GenerateRequest = parse_body(&body)?;
    let (resp, ms) = run_generate(&s, req).await?;
    let mut r = Json(resp).into_response();
    if let Ok(v) = HeaderValue::from_str(&format!("generate;dur={ms:.1}")) {
        r.headers_mut().insert("server-timing", v);
    }
    Ok(r)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RenderRequest {
    #[serde(default)]
    snapshot: Option<TrafficSnapshot>,
    #[serde(default)]
    request: Option<GenerateRequest>,
    #[serde(default = "default_channel")]
    channel: String,
}

fn default_channel() -> String {
    Channel::Speed.name().to_string()
}

async fn render(State(s): State<Shared>, body: Bytes) -> Result<Response, AppError> {
    let req: RenderRequest = parse_body(&body)?;
    let channel: Channel = req.channel.parse()?;
    let snapshot = match (req.snapshot, req.request) {
        (Some(snap), None) => snap,
        (None, Some(gen)) => run_generate(&s, gen).await?.0.snapshot,
        _ => return Err(invalid("give exactly one of snapshot or request")),
    };
    let svg = render_map(&snapshot, s.graph(), channel)?;
    Ok(([(header::CONTENT_TYPE, "image/svg+xml")], svg).into_response())
}

async fn api_not_found() -> Response {
    error_response(StatusCode::NOT_FOUND, "not_found", "no such endpoint".into())
}

async fn method_not_allowed() -> Response {
    error_response(
        StatusCode::METHOD_NOT_ALLOWED,
        "method_not_allowed",
        "method not allowed for this endpoint".into(),
    )
}

/// Routes under `/api`, plus static files from `ui_dir` when given.
pub fn router(state: Shared, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/network", get(network))
        .route("/vocab", get(vocab))
        .route("/presets", get(preset_list))
        .route("/generate", post(generate))
        .route("/render", post(render))
        .fallback(api_not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}

/// Serve until SIGINT or SIGTERM.
pub async fn serve(state: AppState, bind: &str, ui_dir: Option<PathBuf>) -> AppResult<()> {
    let addr: SocketAddr = bind
        .parse()
        .map_err(|e| invalid(format!("bad bind address {bind:?}: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| runtime(format!("cannot bind {addr}: {e}")))?;
    tracing::info!(
        addr = %listener.local_addr().map_err(|e| runtime(e.to_string()))?,
        model = %state.loaded.model_hash,
        "listening"
    );
    axum::serve(listener, router(Arc::new(state), ui_dir))
        .with_graceful_shutdown(shutdown_signal())
        .await
        .map_err(|e| runtime(e.to_string()))
}
