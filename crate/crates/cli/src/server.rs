//! HTTP suggestion service: `POST /suggest`, `GET /health`, static `/ui`.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;

use tsuggest::corpus_io::tokenize;
use tsuggest::evaluator::Suggestion;
use tsuggest::model::checkpoint::Checkpoint;
use tsuggest::suggest::Suggester;

use crate::app::ServeArgs;

pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestRequest {
    pub source: String,
    pub translation: String,
    /// Word span `[i, j)` of the tokenized translation.
    pub span: [usize; 2],
    #[serde(default)]
    pub hint: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestResponse {
    pub suggestions: Vec<Suggestion>,
    pub model_id: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

#[derive(Clone)]
pub struct AppState {
    pub suggester: Option<Arc<Suggester>>,
    pub permits: Arc<Semaphore>,
    pub timeout: Duration,
}

impl AppState {
    pub fn new(suggester: Option<Suggester>, workers: usize, timeout: Duration) -> Self {
        AppState { suggester: suggester.map(Arc::new), permits: Arc::new(Semaphore::new(workers.max(1))), timeout }
    }
}

fn error(status: StatusCode, code: &str, detail: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: code.to_owned(), detail: detail.into() })).into_response()
}

pub fn router(state: AppState, ui: Option<PathBuf>) -> Router {
    let mut r = Router::new()
        .route("/health", get(health))
        .route("/suggest", post(suggest))
        .with_state(state);
    if let Some(dir) = ui {
        r = r.nest_service("/ui", ServeDir::new(dir));
    }
    r
}

async fn health(State(st): State<AppState>) -> Json<serde_json::Value> {
    Json(match &st.suggester {
        Some(s) => serde_json::json!({ "status": "ok", "model_id": s.model_id() }),
        None => serde_json::json!({ "status": "no_model", "model_id": null }),
    })
}

async fn suggest(State(st): State<AppState>, body: Bytes) -> Response {
    let start = Instant::now();
    let req: SuggestRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()),
    };
    let Some(s) = st.suggester.clone() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "server started without a model");
    };
    let translation = tokenize(&req.translation);
    let [i, j] = req.span;
    if i > j || j > translation.len() {
        return error(
            StatusCode::BAD_REQUEST,
            "invalid_span",
            format!("span [{i}, {j}) invalid for a translation of {} tokens", translation.len()),
        );
    }
    let k = req.k.unwrap_or(DEFAULT_K.min(s.beam().beam_size));
    if k == 0 || k > s.beam().beam_size {
        return error(StatusCode::BAD_REQUEST, "invalid_k", format!("k must be in 1..={}", s.beam().beam_size));
    }
    let Ok(_permit) = st.permits.clone().acquire_owned().await else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "shutting_down", "worker pool closed");
    };
    let source = tokenize(&req.source);
    let hint = req.hint.as_deref().map(tokenize);
    let model = s.clone();
    let job = tokio::task::spawn_blocking(move || model.suggest(&source, &translation, (i, j), hint.as_deref(), k));
    let out = match tokio::time::timeout(st.timeout, job).await {
        Err(_) => return error(StatusCode::GATEWAY_TIMEOUT, "timeout", format!("no answer within {:?}", st.timeout)),
        Ok(Err(e)) => return error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        Ok(Ok(Err(e))) => {
            let status = match e {
                tsuggest::Error::PositionOverflow { .. } | tsuggest::Error::SpanBounds { .. } => StatusCode::BAD_REQUEST,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            };
            return error(status, "suggest_failed", e.to_string());
        }
        Ok(Ok(Ok(out))) => out,
    };
    Json(SuggestResponse {
        suggestions: out.suggestions,
        model_id: s.model_id().to_owned(),
        latency_ms: start.elapsed().as_millis() as u64,
    })
    .into_response()
}

pub fn serve_cmd(a: ServeArgs) -> anyhow::Result<()> {
    let beam = a.beam_config()?;
    let suggester = match &a.model {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            Some(Suggester::from_checkpoint(ck, beam)?)
        }
        None => {
            log::warn!("no --model given; /suggest will answer 503");
            None
        }
    };
    crate::app::echo_config(&serde_json::json!({
        "host": a.host, "port": a.port, "beam": beam, "workers": a.workers,
        "timeout_secs": a.timeout_secs, "ui": a.ui,
        "model_id": suggester.as_ref().map(|s| s.model_id().to_owned()),
    }));
    let ui = a.ui.is_dir().then(|| a.ui.clone());
    if ui.is_none() {
        log::warn!("{} is not a directory; /ui disabled", a.ui.display());
    }
    let state = AppState::new(suggester, a.workers, Duration::from_secs(a.timeout_secs));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state, ui))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
