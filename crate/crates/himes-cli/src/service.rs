//! HTTP service exposing the memory layer and the answer pipeline.
//!
//! Endpoints (JSON in/out, versioned under /v1):
//!   POST /v1/memory/store   {user_id, query} -> {record_id, topic, subtopic}
//!   POST /v1/memory/recall  {user_id, query, n, scope?} -> ranked records
//!   POST /v1/rerank         {user_id, docs, k} -> golden chunks
//!   POST /v1/answer         {user_id, history, query, config?} -> {response, trace_id}
//!   GET  /v1/trace/{id}     -> the full pipeline trace
//!   GET  /v1/health         -> {status: "ok"}
//!
//! Errors: 400 validation, 422 dimension/taxonomy violations, 502 upstream
//! client failure (body names the stage), 503 store unavailable. Bodies are
//! `{code, stage, message}`.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, Request, State};
use axum::http::StatusCode;
use axum::middleware::Next;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use himes_core::clients::http::{HttpChatClient, HttpClientConfig, HttpEmbedderClient};
use himes_core::clients::stub::{
    EchoRewriter, HashedBagEmbedder, StubResponder, TaxonomyOverlapClassifier,
};
use himes_core::clients::{ChatClient, ClassifierClient, EmbedderClient};
use himes_core::kb::KnowledgeBase;
use himes_core::pipeline::{
    AccountMeta, DialogueHistory, DialogueTurn, Pipeline, PipelineConfig, PipelineTrace, Role,
};
use himes_core::rerank::{rerank_top_k, RetrievedDocument};
use himes_core::store::{classify_query, MemoryStore, RecallScope};
use himes_core::taxonomy::TopicTaxonomy;
use himes_core::Error as CoreError;

use crate::config::{ClientMode, ClientsConfig, ServiceConfig};

/// Exclusive ownership of a store directory, held for the service lifetime.
pub struct StoreLock {
    path: PathBuf,
}

impl StoreLock {
    pub fn acquire(dir: &Path) -> himes_core::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(StoreLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CoreError::StoreUnavailable(format!(
                    "store directory {} is locked by another process (remove {} if stale)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub struct ServiceClients {
    pub rewriter: Arc<dyn ChatClient>,
    pub responder: Arc<dyn ChatClient>,
    pub embedder: Arc<dyn EmbedderClient>,
    pub classifier: Arc<dyn ClassifierClient>,
}

pub fn build_clients(
    config: &ClientsConfig,
    taxonomy: &TopicTaxonomy,
) -> himes_core::Result<ServiceClients> {
    match config.mode {
        ClientMode::Stub => Ok(ServiceClients {
            rewriter: Arc::new(EchoRewriter),
            responder: Arc::new(StubResponder::new(0)),
            embedder: Arc::new(HashedBagEmbedder::new(config.embed_dim)),
            classifier: Arc::new(TaxonomyOverlapClassifier::new(taxonomy)),
        }),
        ClientMode::Http => {
            let chat_endpoint = config.chat_endpoint.clone().ok_or_else(|| {
                CoreError::InvalidConfig("http client mode needs chat_endpoint".into())
            })?;
            let embed_endpoint = config.embed_endpoint.clone().ok_or_else(|| {
                CoreError::InvalidConfig("http client mode needs embed_endpoint".into())
            })?;
            let http = |endpoint: &str| {
                let mut cfg = HttpClientConfig::new(endpoint);
                cfg.auth_token = config.auth_token.clone();
                cfg.timeout = std::time::Duration::from_secs(config.timeout_secs);
                cfg.max_retries = config.max_retries;
                cfg
            };
            let rewrite_endpoint = config.rewrite_endpoint.as_deref().unwrap_or(&chat_endpoint);
            let rewriter = Arc::new(HttpChatClient::new(http(rewrite_endpoint), "rewriter")?);
            let responder = Arc::new(HttpChatClient::new(http(&chat_endpoint), "responder")?);
            let embedder = Arc::new(HttpEmbedderClient::new(
                http(&embed_endpoint),
                "embedder",
                config.embed_dim,
            )?);
            let classifier = Arc::new(himes_core::clients::http::ChatClassifier::new(
                HttpChatClient::new(http(&chat_endpoint), "classifier")?,
                taxonomy,
            ));
            Ok(ServiceClients {
                rewriter,
                responder,
                embedder,
                classifier,
            })
        }
    }
}

pub struct AppState {
    pub store: RwLock<MemoryStore>,
    pub kb: KnowledgeBase,
    pub taxonomy: TopicTaxonomy,
    pub clients: ServiceClients,
    pub defaults: PipelineConfig,
    pub account: AccountMeta,
    pub meta_prompt: String,
    pub comments: String,
    pub auth_token: Option<String>,
    pub traces: RwLock<HashMap<String, PipelineTrace>>,
    _lock: Option<StoreLock>,
}

pub type SharedState = Arc<AppState>;

/// Builds the full service state from a resolved configuration: acquires the
/// store lock, replays the store logs, loads and embeds the knowledge base.
pub fn build_state(config: &ServiceConfig) -> himes_core::Result<AppState> {
    let taxonomy = match &config.taxonomy_path {
        Some(path) => TopicTaxonomy::from_file(path)?,
        None => TopicTaxonomy::shipped_default(),
    };
    let clients = build_clients(&config.clients, &taxonomy)?;
    let lock = StoreLock::acquire(&config.store_dir)?;
    let store = MemoryStore::open(
        &config.store_dir,
        taxonomy.clone(),
        clients.embedder.dimension(),
    )?;
    let kb = match &config.kb_path {
        Some(path) => KnowledgeBase::load(path, &*clients.embedder, true)?,
        None => KnowledgeBase::from_documents(Vec::new(), &*clients.embedder)?,
    };
    Ok(AppState {
        store: RwLock::new(store),
        kb,
        taxonomy,
        clients,
        defaults: config.pipeline.clone(),
        account: AccountMeta {
            biz_id: "himes-service".into(),
            agent: "himes service account".into(),
        },
        meta_prompt: String::new(),
        comments: "(none)".into(),
        auth_token: config.auth_token.clone(),
        traces: RwLock::new(HashMap::new()),
        _lock: Some(lock),
    })
}

/// In-memory state for tests and embedded use; no lock file, no persistence.
pub fn build_state_in_memory(
    clients: ServiceClients,
    kb: KnowledgeBase,
    defaults: PipelineConfig,
) -> AppState {
    let taxonomy = TopicTaxonomy::shipped_default();
    let store = MemoryStore::in_memory(taxonomy.clone(), clients.embedder.dimension());
    AppState {
        store: RwLock::new(store),
        kb,
        taxonomy,
        clients,
        defaults,
        account: AccountMeta {
            biz_id: "himes-service".into(),
            agent: "himes service account".into(),
        },
        meta_prompt: String::new(),
        comments: "(none)".into(),
        auth_token: None,
        traces: RwLock::new(HashMap::new()),
        _lock: None,
    }
}

impl AppState {
    /// Requires `Authorization: Bearer <token>` on every endpoint except
    /// /v1/health.
    pub fn with_auth_token(mut self, token: impl Into<String>) -> Self {
        self.auth_token = Some(token.into());
        self
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    stage: Option<String>,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            stage: None,
            message: message.into(),
        }
    }

    fn validation(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "validation", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Stage { stage, source, .. } => {
                let mut api = ApiError::from(*source);
                api.stage = Some(stage.to_string());
                api
            }
            CoreError::Transport { .. } | CoreError::MalformedReply(_) => {
                ApiError::new(StatusCode::BAD_GATEWAY, "upstream", e.to_string())
            }
            CoreError::DimensionMismatch { .. }
            | CoreError::NotUnitNorm { .. }
            | CoreError::ZeroVector => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "dimension", e.to_string())
            }
            CoreError::UnknownPartition { .. } | CoreError::InvalidTaxonomy(_) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "taxonomy", e.to_string())
            }
            CoreError::StoreUnavailable(_) => {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "store_unavailable", e.to_string())
            }
            other => ApiError::validation(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({
            "code": self.code,
            "stage": self.stage,
            "message": self.message,
        });
        (self.status, Json(body)).into_response()
    }
}

async fn run_blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Deserialize)]
struct StoreRequest {
    user_id: String,
    query: String,
}

#[derive(Serialize)]
struct StoreResponse {
    record_id: u64,
    topic: String,
    subtopic: String,
}

async fn memory_store(
    State(state): State<SharedState>,
    Json(request): Json<StoreRequest>,
) -> Result<Json<StoreResponse>, ApiError> {
    run_blocking(move || {
        if request.query.trim().is_empty() {
            return Err(ApiError::validation("query must be non-empty"));
        }
        let classification =
            classify_query(&request.query, &state.taxonomy, &*state.clients.classifier)
                .map_err(ApiError::from)?;
        let embedding = state
            .clients
            .embedder
            .embed(&request.query)
            .map_err(ApiError::from)?;
        let mut store = state
            .store
            .write()
            .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "store_unavailable", "store lock poisoned"))?;
        let record_id = store
            .store_query(
                &request.user_id,
                &request.query,
                classification.partition.clone(),
                embedding,
                Utc::now(),
            )
            .map_err(ApiError::from)?;
        Ok(Json(StoreResponse {
            record_id,
            topic: classification.partition.topic,
            subtopic: classification.partition.subtopic,
        }))
    })
    .await
}

#[derive(Deserialize)]
struct RecallRequest {
    user_id: String,
    query: String,
    n: usize,
    /// "partition" (default, partition-first with global fill) or "global".
    #[serde(default)]
    scope: Option<String>,
}

#[derive(Serialize)]
struct RecallHit {
    record_id: u64,
    query_text: String,
    topic: String,
    subtopic: String,
    similarity: f64,
    timestamp: DateTime<Utc>,
}

#[derive(Serialize)]
struct RecallResponse {
    results: Vec<RecallHit>,
}

async fn memory_recall(
    State(state): State<SharedState>,
    Json(request): Json<RecallRequest>,
) -> Result<Json<RecallResponse>, ApiError> {
    run_blocking(move || {
        let embedding = state
            .clients
            .embedder
            .embed(&request.query)
            .map_err(ApiError::from)?;
        let store = state
            .store
            .read()
            .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "store_unavailable", "store lock poisoned"))?;
        let results = match request.scope.as_deref() {
            Some("global") => store
                .recall_top_n(&request.user_id, &embedding, request.n, &RecallScope::Global)
                .map_err(ApiError::from)?,
            Some("partition") | None => {
                let classification =
                    classify_query(&request.query, &state.taxonomy, &*state.clients.classifier)
                        .map_err(ApiError::from)?;
                store
                    .recall_partition_first(
                        &request.user_id,
                        &embedding,
                        request.n,
                        &classification.partition,
                    )
                    .map_err(ApiError::from)?
            }
            Some(other) => {
                return Err(ApiError::validation(format!(
                    "unknown scope '{other}' (partition|global)"
                )))
            }
        };
        Ok(Json(RecallResponse {
            results: results
                .into_iter()
                .map(|hit| RecallHit {
                    record_id: hit.record.record_id,
                    query_text: hit.record.query_text,
                    topic: hit.record.partition.topic,
                    subtopic: hit.record.partition.subtopic,
                    similarity: hit.similarity,
                    timestamp: hit.record.timestamp,
                })
                .collect(),
        }))
    })
    .await
}

#[derive(Deserialize)]
struct RerankRequest {
    user_id: String,
    docs: Vec<RetrievedDocument>,
    k: usize,
}

#[derive(Serialize)]
struct RerankChunk {
    doc_id: String,
    chunk_index: usize,
    text: String,
    score: f64,
}

#[derive(Serialize)]
struct RerankResponse {
    chunks: Vec<RerankChunk>,
    no_memory_fallback: bool,
}

async fn rerank(
    State(state): State<SharedState>,
    Json(request): Json<RerankRequest>,
) -> Result<Json<RerankResponse>, ApiError> {
    run_blocking(move || {
        let history = {
            let store = state
                .store
                .read()
                .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "store_unavailable", "store lock poisoned"))?;
            // most recent stored queries of this user
            let mut records: Vec<_> = store
                .records()
                .filter(|r| r.user_id == request.user_id)
                .cloned()
                .collect();
            records.sort_by(|a, b| b.timestamp.cmp(&a.timestamp).then(b.record_id.cmp(&a.record_id)));
            records.truncate(state.defaults.top_n_history);
            records
        };
        let output = rerank_top_k(
            &request.docs,
            &history,
            request.k,
            &state.defaults.chunk_policy,
            &*state.clients.embedder,
            state.defaults.aggregation,
        )
        .map_err(ApiError::from)?;
        Ok(Json(RerankResponse {
            chunks: output
                .chunks
                .into_iter()
                .map(|scored| RerankChunk {
                    doc_id: scored.chunk.doc_id,
                    chunk_index: scored.chunk.chunk_index,
                    text: scored.chunk.text,
                    score: scored.score,
                })
                .collect(),
            no_memory_fallback: output.no_memory_fallback,
        }))
    })
    .await
}

#[derive(Deserialize)]
struct AnswerTurn {
    role: String,
    text: String,
    #[serde(default)]
    timestamp: Option<DateTime<Utc>>,
}

#[derive(Deserialize, Default)]
struct ConfigOverrides {
    stm_enabled: Option<bool>,
    ltm_enabled: Option<bool>,
    include_history_in_retrieval: Option<bool>,
    top_n_history: Option<usize>,
    top_k_chunks: Option<usize>,
    top_r_docs: Option<usize>,
    context_budget_chars: Option<usize>,
}

#[derive(Deserialize)]
struct AnswerRequest {
    user_id: String,
    #[serde(default)]
    history: Vec<AnswerTurn>,
    query: String,
    #[serde(default)]
    config: ConfigOverrides,
}

#[derive(Serialize)]
struct AnswerResponse {
    response: String,
    trace_id: String,
}

fn apply_overrides(mut config: PipelineConfig, overrides: &ConfigOverrides) -> PipelineConfig {
    if let Some(v) = overrides.stm_enabled {
        config.stm_enabled = v;
    }
    if let Some(v) = overrides.ltm_enabled {
        config.ltm_enabled = v;
    }
    if let Some(v) = overrides.include_history_in_retrieval {
        config.include_history_in_retrieval = v;
    }
    if let Some(v) = overrides.top_n_history {
        config.top_n_history = v;
    }
    if let Some(v) = overrides.top_k_chunks {
        config.top_k_chunks = v;
    }
    if let Some(v) = overrides.top_r_docs {
        config.top_r_docs = v;
    }
    if let Some(v) = overrides.context_budget_chars {
        config.context_budget_chars = v;
    }
    config
}

async fn answer(
    State(state): State<SharedState>,
    Json(request): Json<AnswerRequest>,
) -> Result<Json<AnswerResponse>, ApiError> {
    run_blocking(move || {
        let now = Utc::now();
        let mut history = DialogueHistory::new();
        let n = request.history.len() as i64;
        for (i, turn) in request.history.iter().enumerate() {
            let role = if turn.role == "user" { Role::User } else { Role::Assistant };
            let at = turn
                .timestamp
                .unwrap_or_else(|| now - Duration::minutes(n - i as i64));
            history
                .push(DialogueTurn::new(role, turn.text.clone(), at).map_err(ApiError::from)?)
                .map_err(ApiError::from)?;
        }
        let config = apply_overrides(state.defaults.clone(), &request.config);
        let pipeline = Pipeline {
            rewriter: &*state.clients.rewriter,
            responder: &*state.clients.responder,
            embedder: &*state.clients.embedder,
            classifier: &*state.clients.classifier,
            kb: &state.kb,
            account: state.account.clone(),
            meta_prompt: state.meta_prompt.clone(),
            comments: state.comments.clone(),
            config,
        };
        let (response, mut trace) = {
            let mut store = state
                .store
                .write()
                .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "store_unavailable", "store lock poisoned"))?;
            pipeline
                .answer(&mut store, &request.user_id, &history, &request.query, now)
                .map_err(ApiError::from)?
        };
        let trace_id = uuid::Uuid::new_v4().to_string();
        trace.trace_id = Some(trace_id.clone());
        state
            .traces
            .write()
            .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "trace lock poisoned"))?
            .insert(trace_id.clone(), trace);
        Ok(Json(AnswerResponse { response, trace_id }))
    })
    .await
}

async fn get_trace(
    State(state): State<SharedState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<PipelineTrace>, ApiError> {
    let traces = state
        .traces
        .read()
        .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "trace lock poisoned"))?;
    traces
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no trace with id {id}")))
}

async fn auth_middleware(
    State(state): State<SharedState>,
    request: Request,
    next: Next,
) -> Response {
    if let Some(expected) = &state.auth_token {
        if request.uri().path() != "/v1/health" {
            let authorized = request
                .headers()
                .get(axum::http::header::AUTHORIZATION)
                .and_then(|v| v.to_str().ok())
                .map(|v| v == format!("Bearer {expected}"))
                .unwrap_or(false);
            if !authorized {
                return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
                    .into_response();
            }
        }
    }
    next.run(request).await
}

pub fn build_router(state: SharedState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/memory/store", post(memory_store))
        .route("/v1/memory/recall", post(memory_recall))
        .route("/v1/rerank", post(rerank))
        .route("/v1/answer", post(answer))
        .route("/v1/trace/{id}", get(get_trace))
        .layer(axum::middleware::from_fn_with_state(state.clone(), auth_middleware))
        .with_state(state)
}

/// Binds and serves until the process is interrupted.
pub async fn serve(state: SharedState, listen: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, build_router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
