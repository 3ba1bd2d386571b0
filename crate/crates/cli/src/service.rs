//! HTTP service: classification with live document inserts and atomic reindexing.
//!
//! Endpoints:
//!
//! * `POST /v1/classify` `{"text", "mode"?, "shots"?}` returns the label, a trace id and the exemplars.
//! * `POST /v1/documents` `{"id", "body", "label", ...}` embeds and inserts one document.
//! * `POST /v1/reindex` rebuilds the index from the corpus store and swaps it in.
//! * `GET /v1/health` reports the index size.
//! * `GET /v1/traces/{id}` returns a stored trace.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rac_core::corpus::{self, CorpusFormat, Document, LabelAliases, Partition};
use rac_core::index::{IndexError, VectorIndex};
use rac_core::pipeline::{classify, Components, Mode, PipelineConfig, PipelineError, PredictionTrace};
use rac_core::providers::{embed_one, CompletionModel, EmbedRole, Embedder, Reranker};
use rac_core::retrieval::{build_index, index_record, RetrievalError};
use serde::Deserialize;
use serde_json::{json, Value};
use tracing::{info, warn};

use crate::config::AppConfig;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn unavailable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": { "code": self.code, "message": self.message } }))).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::EmptyDocument(_) => ApiError::bad_request(e.to_string()),
            PipelineError::ComponentMissing { .. }
            | PipelineError::Retrieval(RetrievalError::Index(IndexError::EmptyIndex)) => {
                ApiError::unavailable(e.to_string())
            }
            PipelineError::Retrieval(RetrievalError::InvalidShots { .. }) => ApiError::bad_request(e.to_string()),
            PipelineError::Provider(_) | PipelineError::Retrieval(RetrievalError::Provider(_)) => {
                ApiError::new(StatusCode::BAD_GATEWAY, "provider_error", e.to_string())
            }
            _ => ApiError::internal(e.to_string()),
        }
    }
}

/// Model backends shared by all requests.
#[derive(Clone)]
pub struct Providers {
    pub embedder: Arc<dyn Embedder>,
    pub reranker: Arc<dyn Reranker>,
    pub llm: Arc<dyn CompletionModel>,
}

impl Providers {
    pub fn from_config(cfg: &AppConfig) -> anyhow::Result<Self> {
        Ok(Self {
            embedder: cfg.providers.embedder.build_embedder()?,
            reranker: cfg.providers.reranker.build_reranker()?,
            llm: cfg.providers.llm.build_classifier()?,
        })
    }
}

pub struct AppState {
    cfg: AppConfig,
    pipeline: PipelineConfig,
    aliases: LabelAliases,
    providers: Providers,
    /// Readers classify under a read guard; inserts and swaps take the write guard.
    index: RwLock<Option<VectorIndex>>,
    /// Documents the index is rebuilt from.
    store: Mutex<Vec<Document>>,
    /// Serializes inserts against each other and against reindexing.
    writer: tokio::sync::Mutex<()>,
    reindexing: AtomicBool,
    traces: Mutex<HashMap<String, PredictionTrace>>,
    trace_log: Option<Mutex<File>>,
}

impl AppState {
    pub fn new(
        cfg: AppConfig,
        providers: Providers,
        index: Option<VectorIndex>,
        store: Vec<Document>,
    ) -> anyhow::Result<Arc<Self>> {
        let trace_log = match &cfg.service.trace_log {
            Some(p) => Some(Mutex::new(OpenOptions::new().create(true).append(true).open(p)?)),
            None => None,
        };
        Ok(Arc::new(Self {
            pipeline: cfg.pipeline(),
            aliases: cfg.aliases(),
            cfg,
            providers,
            index: RwLock::new(index),
            store: Mutex::new(store),
            writer: tokio::sync::Mutex::new(()),
            reindexing: AtomicBool::new(false),
            traces: Mutex::new(HashMap::new()),
            trace_log,
        }))
    }

    pub fn index_size(&self) -> usize {
        self.index.read().unwrap().as_ref().map_or(0, VectorIndex::len)
    }

    fn classify_blocking(&self, doc: &Document, mode: Mode) -> Result<PredictionTrace, ApiError> {
        let guard = self.index.read().unwrap();
        if mode.uses_index() && guard.is_none() {
            return Err(ApiError::unavailable(
                "no index is loaded; add documents with POST /v1/documents or run POST /v1/reindex",
            ));
        }
        let components = Components {
            index: guard.as_ref(),
            embedder: Some(self.providers.embedder.as_ref()),
            reranker: Some(self.providers.reranker.as_ref()),
            llm: self.providers.llm.as_ref(),
        };
        Ok(classify(doc, mode, components, &self.pipeline)?)
    }

    fn record_trace(&self, mut trace: PredictionTrace) -> PredictionTrace {
        let id = uuid::Uuid::new_v4().to_string();
        trace.trace_id = Some(id.clone());
        if let Some(log) = &self.trace_log {
            let line = serde_json::to_string(&trace).expect("trace serializes");
            if let Err(e) = writeln!(log.lock().unwrap(), "{line}") {
                warn!(error = %e, "failed to append trace");
            }
        }
        self.traces.lock().unwrap().insert(id, trace.clone());
        trace
    }

    fn store_path(&self) -> Option<&PathBuf> {
        self.cfg.service.corpus_store.as_ref()
    }

    /// Labeled, non-test documents from the store file (if configured) or memory.
    fn snapshot_store(&self) -> Result<Vec<Document>, ApiError> {
        let docs = match self.store_path().filter(|p| p.exists()) {
            Some(p) => corpus::parse_corpus_with(p, CorpusFormat::from_path(p), &self.aliases)
                .map_err(|e| ApiError::internal(format!("reading corpus store: {e}")))?,
            None => self.store.lock().unwrap().clone(),
        };
        Ok(docs.into_iter().filter(|d| d.label.is_some() && d.partition != Partition::Test).collect())
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifyRequest {
    text: String,
    #[serde(default)]
    mode: Option<String>,
    #[serde(default)]
    shots: Option<usize>,
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    title: Option<String>,
}

impl ClassifyRequest {
    fn mode(&self) -> Result<Mode, ApiError> {
        let raw = self.mode.as_deref().unwrap_or("rac");
        if raw.eq_ignore_ascii_case("rac") {
            return Ok(Mode::Rac(self.shots.unwrap_or(3)));
        }
        let mode: Mode = raw.parse().map_err(ApiError::bad_request)?;
        match (mode, self.shots) {
            (Mode::Rac(s), Some(t)) if s != t => {
                Err(ApiError::bad_request(format!("mode {mode} conflicts with shots {t}")))
            }
            (Mode::LlmOnly | Mode::LlmWithDefinitions, Some(_)) => {
                Err(ApiError::bad_request(format!("shots is only valid for rac modes, not {mode}")))
            }
            _ => Ok(mode),
        }
    }
}

async fn classify_handler(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: ClassifyRequest = parse_body(&body)?;
    let mode = req.mode()?;
    if req.text.trim().is_empty() {
        return Err(ApiError::bad_request("text must not be empty"));
    }
    let mut doc = Document::new(req.id.clone().unwrap_or_else(|| "request".into()), req.text);
    doc.title = req.title.unwrap_or_default();
    let state = st.clone();
    let trace = blocking(move || state.classify_blocking(&doc, mode)).await?;
    let trace = st.record_trace(trace);
    Ok(Json(json!({
        "label": trace.prediction.label(),
        "prediction": trace.prediction,
        "mode": trace.mode,
        "trace_id": trace.trace_id,
        "exemplars": trace.exemplars,
        "warnings": trace.warnings,
        "error": trace.error,
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentRequest {
    id: String,
    body: String,
    label: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    date: Option<String>,
    #[serde(default)]
    sender: Option<String>,
    #[serde(default)]
    recipient: Option<String>,
}

fn reindex_in_progress() -> ApiError {
    ApiError::unavailable("a reindex is in progress; retry once it completes")
}

async fn documents_handler(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: DocumentRequest = parse_body(&body)?;
    let label = st.aliases.resolve(&req.label).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let doc = Document {
        title: req.title,
        date: req.date,
        sender: req.sender,
        recipient: req.recipient,
        ..Document::new(req.id, req.body).with_label(label).with_partition(Partition::Train)
    };
    doc.validate().map_err(ApiError::bad_request)?;

    if st.reindexing.load(Ordering::SeqCst) {
        return Err(reindex_in_progress());
    }
    let _writer = st.writer.lock().await;
    if st.reindexing.load(Ordering::SeqCst) {
        return Err(reindex_in_progress());
    }
    let state = st.clone();
    let size = blocking(move || {
        let duplicate =
            || ApiError::new(StatusCode::CONFLICT, "duplicate_doc_id", format!("document {} already exists", doc.id));
        if state.store.lock().unwrap().iter().any(|d| d.id == doc.id)
            || state.index.read().unwrap().as_ref().is_some_and(|i| i.contains(&doc.id))
        {
            return Err(duplicate());
        }
        let vector = embed_one(&doc.body, EmbedRole::Passage, state.providers.embedder.as_ref())
            .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, "provider_error", e.to_string()))?;
        let record = index_record(&doc, vector, "service").map_err(|e| ApiError::bad_request(e.to_string()))?;
        let size = {
            let mut guard = state.index.write().unwrap();
            if guard.is_none() {
                *guard = Some(VectorIndex::new(state.cfg.hnsw).map_err(|e| ApiError::internal(e.to_string()))?);
            }
            let index = guard.as_mut().unwrap();
            index.insert(record).map_err(|e| match e {
                IndexError::DuplicateDocId(_) => duplicate(),
                IndexError::DimensionMismatch { .. } => ApiError::bad_request(e.to_string()),
                other => ApiError::internal(other.to_string()),
            })?;
            index.len()
        };
        if let Some(p) = state.store_path() {
            corpus::append_jsonl(p, std::slice::from_ref(&doc))
                .map_err(|e| ApiError::internal(format!("document indexed but not persisted: {e}")))?;
        }
        state.store.lock().unwrap().push(doc);
        Ok(size)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(json!({ "status": "indexed", "index_size": size }))).into_response())
}

/// Clears the reindex flag however the rebuild ends.
struct ReindexFlag<'a>(&'a AtomicBool);

impl Drop for ReindexFlag<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

async fn reindex_handler(State(st): State<Arc<AppState>>) -> Result<Json<Value>, ApiError> {
    if st.reindexing.swap(true, Ordering::SeqCst) {
        return Err(reindex_in_progress());
    }
    let _flag = ReindexFlag(&st.reindexing);
    let _writer = st.writer.lock().await;
    let docs = st.snapshot_store()?;
    let state = st.clone();
    // Build aside without touching the live index, then swap under the write guard.
    let fresh = blocking(move || {
        build_index(
            &docs,
            state.providers.embedder.as_ref(),
            state.cfg.hnsw,
            state.cfg.providers.embedder.batch_size,
            "service",
        )
        .map_err(|e| ApiError::internal(format!("reindex failed: {e}")))
    })
    .await?;
    let size = fresh.len();
    *st.index.write().unwrap() = Some(fresh);
    info!(index_size = size, "index swapped");
    Ok(Json(json!({ "status": "ok", "index_size": size })))
}

async fn health_handler(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "index_size": st.index_size(),
        "index_loaded": st.index.read().unwrap().is_some(),
        "reindexing": st.reindexing.load(Ordering::SeqCst),
    }))
}

async fn trace_handler(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<PredictionTrace>, ApiError> {
    st.traces
        .lock()
        .unwrap()
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no trace {id}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/classify", post(classify_handler))
        .route("/v1/documents", post(documents_handler))
        .route("/v1/reindex", post(reindex_handler))
        .route("/v1/health", get(health_handler))
        .route("/v1/traces/{id}", get(trace_handler))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!(%addr, index_size = state.index_size(), "listening");
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown_signal()).await?;
    Ok(())
}

/// Resolves on Ctrl-C, or SIGTERM on unix.
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
    info!("shutting down");
}
