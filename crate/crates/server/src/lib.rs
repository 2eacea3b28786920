//! HTTP rerank service over an immutable [`Reranker`].
//!
//! `POST /rerank` scores a query against candidate texts in one prefill;
//! `GET /healthz` reports readiness. Work runs on a bounded blocking pool and
//! requests beyond its queue are refused with 503 rather than buffered.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use qrrank_core::data::ListwiseInstance;
use qrrank_core::score::{Reranker, ScoreVector};
use qrrank_core::Error;

/// Instance id given to every request's candidate list.
pub const REQUEST_INSTANCE_ID: &str = "request";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankRequest {
    pub query: String,
    pub candidates: Vec<String>,
    #[serde(default)]
    pub memory_prefix: Option<String>,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub calibrate: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankResponse {
    pub scores: Vec<f64>,
    /// Full ranking, or its first `top_k` entries when requested.
    pub ranking: Vec<usize>,
    pub model_id: String,
    pub head_set_id: String,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub category: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_id: Option<String>,
}

impl RerankRequest {
    /// Checks request-level invariants, naming the offending field.
    pub fn validate(&self) -> Result<(), ErrorBody> {
        let field_err = |field: &str, message: String| ErrorBody {
            category: "argument".into(),
            message,
            field: Some(field.into()),
            error_id: None,
        };
        if self.query.trim().is_empty() {
            return Err(field_err("query", "query is empty".into()));
        }
        if self.candidates.len() < 2 {
            return Err(field_err("candidates", format!("need at least 2 candidates, got {}", self.candidates.len())));
        }
        if let Some(i) = self.candidates.iter().position(|c| c.trim().is_empty()) {
            return Err(field_err(&format!("candidates[{i}]"), "candidate text is empty".into()));
        }
        match self.top_k {
            Some(0) => return Err(field_err("top_k", "top_k must be at least 1".into())),
            Some(k) if k > self.candidates.len() => {
                return Err(field_err("top_k", format!("top_k {k} exceeds {} candidates", self.candidates.len())))
            }
            _ => {}
        }
        Ok(())
    }

    /// The unlabeled instance the library reranks for this request.
    pub fn to_instance(&self) -> ListwiseInstance {
        let mut inst = ListwiseInstance::unlabeled(REQUEST_INSTANCE_ID, self.query.clone(), &self.candidates);
        inst.memory_prefix = self.memory_prefix.clone();
        inst
    }
}

/// Scores a request exactly as the service does, without HTTP.
pub fn rerank_request(reranker: &Reranker, req: &RerankRequest) -> qrrank_core::Result<ScoreVector> {
    let mut options = reranker.options;
    if let Some(c) = req.calibrate {
        options.calibrate = c;
    }
    reranker.rerank_with(&req.to_instance(), &options)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolConfig {
    /// Concurrent scoring jobs.
    pub workers: usize,
    /// Requests allowed to wait for a worker.
    pub queue: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig { workers: 2, queue: 16 }
    }
}

pub struct AppState {
    reranker: Arc<Reranker>,
    admission: Arc<Semaphore>,
    workers: Arc<Semaphore>,
    error_seq: AtomicU64,
}

impl AppState {
    pub fn new(reranker: Reranker, pool: PoolConfig) -> Arc<Self> {
        let workers = pool.workers.max(1);
        Arc::new(AppState {
            reranker: Arc::new(reranker),
            admission: Arc::new(Semaphore::new(workers + pool.queue)),
            workers: Arc::new(Semaphore::new(workers)),
            error_seq: AtomicU64::new(0),
        })
    }

    pub fn reranker(&self) -> &Reranker {
        &self.reranker
    }

    /// Takes one admission slot, waiting if none is free.
    pub async fn admission_permit(&self) -> tokio::sync::OwnedSemaphorePermit {
        self.admission.clone().acquire_owned().await.expect("admission semaphore is never closed")
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new().route("/healthz", get(healthz)).route("/rerank", post(rerank)).with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    Json(serde_json::json!({
        "status": "ready",
        "model_id": state.reranker.model_id(),
        "head_set_id": state.reranker.head_set_id(),
    }))
    .into_response()
}

fn error_response(status: StatusCode, body: ErrorBody) -> Response {
    (status, Json(body)).into_response()
}

async fn rerank(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: RerankRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            let field = missing_or_unknown_field(&e.to_string());
            let status =
                if e.is_syntax() || e.is_eof() { StatusCode::BAD_REQUEST } else { StatusCode::UNPROCESSABLE_ENTITY };
            return error_response(
                status,
                ErrorBody { category: "parse".into(), message: e.to_string(), field, error_id: None },
            );
        }
    };
    if let Err(body) = req.validate() {
        return error_response(StatusCode::UNPROCESSABLE_ENTITY, body);
    }
    let Ok(_admitted) = state.admission.clone().try_acquire_owned() else {
        let mut resp = error_response(
            StatusCode::SERVICE_UNAVAILABLE,
            ErrorBody {
                category: "capacity".into(),
                message: "server at capacity".into(),
                field: None,
                error_id: None,
            },
        );
        resp.headers_mut().insert(header::RETRY_AFTER, header::HeaderValue::from_static("1"));
        return resp;
    };
    let Ok(_worker) = state.workers.clone().acquire_owned().await else {
        return internal(&state, "worker pool closed".into());
    };
    let job_state = state.clone();
    let job = tokio::task::spawn_blocking(move || {
        let t0 = Instant::now();
        let out = rerank_request(&job_state.reranker, &req);
        (out, t0.elapsed(), req.top_k)
    });
    match job.await {
        Ok((Ok(sv), elapsed, top_k)) => {
            let mut ranking = sv.ranking;
            if let Some(k) = top_k {
                ranking.truncate(k);
            }
            Json(RerankResponse {
                scores: sv.scores,
                ranking,
                model_id: state.reranker.model_id().to_string(),
                head_set_id: state.reranker.head_set_id().to_string(),
                latency_ms: elapsed.as_secs_f64() * 1e3,
            })
            .into_response()
        }
        Ok((Err(e), _, _)) => library_error(&state, e),
        Err(join) => internal(&state, format!("scoring task failed: {join}")),
    }
}

fn library_error(state: &AppState, e: Error) -> Response {
    let category = e.category();
    let (status, field) = match e.root() {
        Error::Overflow { .. } | Error::SequenceTooLong { .. } => (StatusCode::PAYLOAD_TOO_LARGE, None),
        Error::UnknownSymbol(_) => (StatusCode::UNPROCESSABLE_ENTITY, None),
        Error::EmptyCandidate { index, .. } => (StatusCode::UNPROCESSABLE_ENTITY, Some(format!("candidates[{index}]"))),
        Error::InvalidArgument(_) | Error::DegenerateInstance(_) => (StatusCode::UNPROCESSABLE_ENTITY, None),
        _ => return internal(state, e.to_string()),
    };
    error_response(
        status,
        ErrorBody { category: category.into(), message: e.root().to_string(), field, error_id: None },
    )
}

fn internal(state: &AppState, detail: String) -> Response {
    let n = state.error_seq.fetch_add(1, Ordering::Relaxed);
    let id = format!("err-{}-{n}", std::process::id());
    tracing::error!(error_id = %id, %detail, "internal error");
    error_response(
        StatusCode::INTERNAL_SERVER_ERROR,
        ErrorBody { category: "internal".into(), message: "internal error".into(), field: None, error_id: Some(id) },
    )
}

/// Pulls the field name out of serde's "missing field `x`" / "unknown field
/// `x`" / "invalid type ... for field" messages.
fn missing_or_unknown_field(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let end = start + msg[start..].find('`')?;
    if msg.contains("field") {
        Some(msg[start..end].to_string())
    } else {
        None
    }
}
