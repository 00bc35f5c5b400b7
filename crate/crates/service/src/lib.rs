//! HTTP sidecar exposing the black-box environment: retrieval and reward
//! scoring over JSON, so an external trainer can consume the recommender
//! without touching its internals.
//!
//! Endpoints:
//!
//! - `POST /v1/retrieve`  body `{"query": str, "k": int}` ->
//!   `{"items": [{"id": str, "score": num}]}`
//! - `POST /v1/reward`    body `{"state_id": str, "action_text": str}` or
//!   `{"batch": [...]}` -> `{"reward": num}` / `{"rewards": [num]}`
//! - `GET  /v1/health`    -> `{"status": "ok", "docs": int, "states": int}`
//!
//! Query-task actions are plain text, tokenized with the corpus tokenizer.
//! Rerank actions use the literal prefix `perm:` followed by comma-separated
//! zero-based slot indices (`perm:2,0,1`); malformed permutations score as
//! decode failures, they are not transport errors.
//!
//! All state is immutable after startup; every handler is pure, so repeated
//! identical requests return identical bodies and concurrent clients see
//! the same results as serial execution.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use recloop_core::corpus::{tokenize, Corpus, RelevanceDict, TaskKind};
use recloop_core::envs::{DecodedAction, EnvError, ProductSearchEnv, RerankEnv};
use recloop_core::metrics::RewardSpec;
use recloop_core::retrieval::Bm25Params;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid k")]
    InvalidK,
    #[error("unknown state id {0:?}")]
    UnknownState(String),
    #[error("batch of {got} exceeds the maximum of {max}")]
    BatchTooLarge { got: usize, max: usize },
    #[error("request timed out")]
    Timeout,
    #[error("environment error: {0}")]
    Env(String),
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        match self {
            ServiceError::InvalidK => StatusCode::BAD_REQUEST,
            ServiceError::UnknownState(_) => StatusCode::NOT_FOUND,
            ServiceError::BatchTooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            ServiceError::Timeout => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Env(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

/// Tunables beyond the environment itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub max_batch: usize,
    pub timeout_secs: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_batch: 256,
            timeout_secs: 10,
        }
    }
}

/// Immutable application state shared by all handlers.
pub struct App {
    search: ProductSearchEnv,
    rerank: RerankEnv,
    config: ServiceConfig,
    docs: usize,
    states: usize,
}

impl App {
    /// Builds the serving environments from loaded data. `reward_spec` and
    /// the cutoffs mirror the training configuration so served rewards equal
    /// in-process ones.
    pub fn new(
        corpus: Corpus,
        relevance: RelevanceDict,
        params: Bm25Params,
        reward_spec: RewardSpec,
        k_train: usize,
        k_eval: usize,
        rerank_cutoff: usize,
        config: ServiceConfig,
    ) -> Result<Self, EnvError> {
        let docs = corpus.len();
        let states = relevance.len();
        let search = ProductSearchEnv::new(
            corpus.clone(),
            relevance.clone(),
            params,
            reward_spec.clone(),
            k_train,
            k_eval,
        )?;
        let rerank = RerankEnv::mixed(corpus, relevance, reward_spec, rerank_cutoff)?;
        Ok(Self {
            search,
            rerank,
            config,
            docs,
            states,
        })
    }

    /// Scores one (state, action text) pair exactly as the in-process
    /// environments would.
    pub fn reward_text(&self, state_id: &str, action_text: &str) -> Result<f64, ServiceError> {
        let state = self
            .search
            .relevance
            .state(state_id)
            .ok_or_else(|| ServiceError::UnknownState(state_id.to_string()))?;
        match state.task {
            TaskKind::ProductSearch | TaskKind::SeqRec => {
                let tokens = tokenize(action_text);
                let decoded = if tokens.is_empty() {
                    DecodedAction::Invalid
                } else {
                    DecodedAction::Query(tokens)
                };
                self.search
                    .reward_decoded(state_id, &decoded)
                    .map_err(|e| ServiceError::Env(e.to_string()))
            }
            TaskKind::Rerank => {
                let m = match &state.payload {
                    recloop_core::corpus::StatePayload::Candidates { candidates, .. } => {
                        candidates.len()
                    }
                    _ => 0,
                };
                let decoded = parse_permutation_text(action_text, m);
                self.rerank
                    .reward_decoded(state, &decoded)
                    .map_err(|e| ServiceError::Env(e.to_string()))
            }
        }
    }
}

/// Parses the `perm:i,j,k` wire encoding into a permutation of `0..m`.
/// Anything malformed decodes as invalid (reward-side failure, not an HTTP
/// error).
pub fn parse_permutation_text(text: &str, m: usize) -> DecodedAction {
    let Some(rest) = text.trim().strip_prefix("perm:") else {
        return DecodedAction::Invalid;
    };
    let mut slots = Vec::new();
    for part in rest.split(',') {
        match part.trim().parse::<usize>() {
            Ok(i) => slots.push(i),
            Err(_) => return DecodedAction::Invalid,
        }
    }
    if slots.len() != m {
        return DecodedAction::Invalid;
    }
    let mut seen = vec![false; m];
    for &s in &slots {
        if s >= m || seen[s] {
            return DecodedAction::Invalid;
        }
        seen[s] = true;
    }
    DecodedAction::Permutation(slots)
}

#[derive(Debug, Deserialize)]
struct RetrieveRequest {
    query: String,
    k: i64,
}

#[derive(Debug, Serialize)]
struct RetrieveItem {
    id: String,
    score: f64,
}

#[derive(Debug, Serialize)]
struct RetrieveResponse {
    items: Vec<RetrieveItem>,
}

#[derive(Debug, Deserialize)]
struct RewardItem {
    state_id: String,
    action_text: String,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RewardRequest {
    Batch { batch: Vec<RewardItem> },
    Single(RewardItem),
}

async fn handle_retrieve(
    State(app): State<Arc<App>>,
    Json(req): Json<RetrieveRequest>,
) -> Result<Json<RetrieveResponse>, ServiceError> {
    if req.k < 1 {
        return Err(ServiceError::InvalidK);
    }
    let run = async {
        let tokens = tokenize(&req.query);
        let items = app
            .search
            .index
            .retrieve(app.search.params, &tokens, req.k as usize)
            .into_iter()
            .map(|(id, score)| RetrieveItem { id, score })
            .collect();
        Ok(Json(RetrieveResponse { items }))
    };
    with_timeout(app.config.timeout_secs, run).await
}

async fn handle_reward(
    State(app): State<Arc<App>>,
    Json(req): Json<RewardRequest>,
) -> Result<Response, ServiceError> {
    let run = async {
        match req {
            RewardRequest::Single(item) => {
                let reward = app.reward_text(&item.state_id, &item.action_text)?;
                Ok(Json(serde_json::json!({ "reward": reward })).into_response())
            }
            RewardRequest::Batch { batch } => {
                if batch.len() > app.config.max_batch {
                    return Err(ServiceError::BatchTooLarge {
                        got: batch.len(),
                        max: app.config.max_batch,
                    });
                }
                let mut rewards = Vec::with_capacity(batch.len());
                for item in &batch {
                    rewards.push(app.reward_text(&item.state_id, &item.action_text)?);
                }
                Ok(Json(serde_json::json!({ "rewards": rewards })).into_response())
            }
        }
    };
    with_timeout(app.config.timeout_secs, run).await
}

async fn handle_health(State(app): State<Arc<App>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "docs": app.docs,
        "states": app.states,
    }))
}

async fn with_timeout<T>(
    secs: u64,
    fut: impl std::future::Future<Output = Result<T, ServiceError>>,
) -> Result<T, ServiceError> {
    match tokio::time::timeout(Duration::from_secs(secs), fut).await {
        Ok(result) => result,
        Err(_) => Err(ServiceError::Timeout),
    }
}

/// Builds the router over shared immutable state.
pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/v1/retrieve", post(handle_retrieve))
        .route("/v1/reward", post(handle_reward))
        .route("/v1/health", get(handle_health))
        .with_state(app)
}

/// Binds and serves until `shutdown` resolves; in-flight requests drain
/// before the listener closes. Returns the bound address once listening.
pub async fn serve(
    app: Arc<App>,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Like [`serve`] but reports the bound address through a channel, for
/// callers that bind port 0.
pub async fn serve_with_addr(
    app: Arc<App>,
    addr: SocketAddr,
    bound_tx: tokio::sync::oneshot::Sender<SocketAddr>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    let _ = bound_tx.send(listener.local_addr()?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(shutdown)
        .await
}
