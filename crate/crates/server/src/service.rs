//! The HTTP service: datasets, sessions, suggestions and session analytics.
//!
//! Request and response bodies are single-line JSON objects, and listings
//! are newline-delimited JSON. Each session is held as an immutable
//! snapshot behind a lock that readers only touch to clone an `Arc`; a
//! writer applies an event batch to a private copy, persists the new log
//! records and then swaps the copy in. Writers on one session are
//! serialized, and different sessions never share a lock.

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use forage_core::analytics::{self, TimeBase};
use forage_core::relevance::DistanceCache;
use forage_core::session::SessionConfig;
use forage_core::{Dataset, Error as CoreError, Format, InteractionEvent, PointId, PolicySpec, Session};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;

use crate::embedder::Embedder;
use crate::store::{valid_id, DatasetMeta, Store};

const MAX_UPLOAD_BYTES: usize = 512 * 1024 * 1024;
const NDJSON: &str = "application/x-ndjson";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub data_dir: PathBuf,
    /// Write datasets and session logs to `data_dir` and reload them on
    /// startup.
    pub persist: bool,
    pub default_policy: PolicySpec,
    pub default_batch_size: usize,
    /// Used for uploads that do not choose their own hash embedding.
    pub embedder: Embedder,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_dir: PathBuf::from("forage-data"),
            persist: true,
            default_policy: PolicySpec::one_step(),
            default_batch_size: 10,
            embedder: Embedder::default(),
        }
    }
}

struct DatasetEntry {
    ds: Arc<Dataset>,
    cache: OnceLock<Option<Arc<DistanceCache>>>,
}

impl DatasetEntry {
    fn new(ds: Dataset) -> Self {
        Self {
            ds: Arc::new(ds),
            cache: OnceLock::new(),
        }
    }

    /// Pairwise distances, built on first use and shared by every session
    /// on this dataset.
    fn cache(&self) -> Option<Arc<DistanceCache>> {
        self.cache
            .get_or_init(|| {
                (self.ds.len() <= DistanceCache::AUTO_LIMIT).then(|| Arc::new(DistanceCache::build(&self.ds)))
            })
            .clone()
    }
}

struct SessionSlot {
    writer: Mutex<()>,
    current: RwLock<Arc<Session>>,
}

impl SessionSlot {
    fn new(s: Session) -> Self {
        Self {
            writer: Mutex::new(()),
            current: RwLock::new(Arc::new(s)),
        }
    }

    fn snapshot(&self) -> Arc<Session> {
        self.current.read().clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub point_id: PointId,
    pub score: f64,
}

fn suggestions_of(s: &Session) -> Vec<Suggestion> {
    s.current_suggestions()
        .iter()
        .map(|&(point_id, score)| Suggestion { point_id, score })
        .collect()
}

/// Response to an event batch. Events are applied in order and the batch
/// stops at the first rejected event; everything before it is committed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    /// Events of the batch that are now in the log, resubmissions included.
    pub accepted: usize,
    /// Events skipped because their event id was already in the log.
    pub duplicates: usize,
    pub suggestions: Vec<Suggestion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Batch position of the rejected event.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
}

pub struct AppState {
    cfg: ServiceConfig,
    store: Option<Store>,
    datasets: RwLock<HashMap<String, Arc<DatasetEntry>>>,
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
}

impl AppState {
    /// Opens the data directory when persistence is on and replays every
    /// stored session. Sessions that no longer replay are skipped with a
    /// warning rather than failing startup.
    pub fn new(cfg: ServiceConfig) -> anyhow::Result<Arc<Self>> {
        let store = if cfg.persist {
            Some(Store::open(&cfg.data_dir)?)
        } else {
            None
        };
        let mut datasets = HashMap::new();
        let mut sessions = HashMap::new();
        if let Some(store) = &store {
            for (id, ds, _) in store.load_datasets()? {
                datasets.insert(id, Arc::new(DatasetEntry::new(ds)));
            }
            for export in store.load_sessions()? {
                let id = export.header.session_id.clone();
                let Some(entry) = datasets.get(&export.header.dataset_id) else {
                    tracing::warn!(session = %id, dataset = %export.header.dataset_id, "skipping session of a missing dataset");
                    continue;
                };
                match Session::replay(&export.header, entry.ds.clone(), entry.cache(), export.events()) {
                    Ok(s) => {
                        sessions.insert(id, Arc::new(SessionSlot::new(s)));
                    }
                    Err(e) => tracing::warn!(session = %id, error = %e, "skipping session that does not replay"),
                }
            }
            tracing::info!(datasets = datasets.len(), sessions = sessions.len(), dir = %store.root().display(), "restored state");
        }
        Ok(Arc::new(Self {
            cfg,
            store,
            datasets: RwLock::new(datasets),
            sessions: RwLock::new(sessions),
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    /// Registers a dataset, persisting it first. `id` is generated when
    /// absent.
    pub fn add_dataset(&self, id: Option<String>, ds: Dataset, meta: &DatasetMeta) -> Result<String, ApiError> {
        let id = id.unwrap_or_else(new_id);
        if !valid_id(&id) {
            return Err(ApiError::bad_request(format!("invalid dataset id {id:?}")));
        }
        if self.datasets.read().contains_key(&id) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("dataset {id} already exists"),
            ));
        }
        if let Some(store) = &self.store {
            store.save_dataset(&id, &ds, meta).map_err(ApiError::internal)?;
        }
        self.datasets
            .write()
            .insert(id.clone(), Arc::new(DatasetEntry::new(ds)));
        Ok(id)
    }

    fn dataset(&self, id: &str) -> Result<Arc<DatasetEntry>, ApiError> {
        self.datasets
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("dataset {id}")))
    }

    fn slot(&self, id: &str) -> Result<Arc<SessionSlot>, ApiError> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("session {id}")))
    }

    /// The latest committed state of a session.
    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.read().get(id).map(|s| s.snapshot())
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn create_session(&self, dataset_id: &str, config: SessionConfig) -> Result<String, ApiError> {
        let entry = self.dataset(dataset_id)?;
        if !entry.ds.is_embedded() {
            return Err(ApiError::bad_request(format!("dataset {dataset_id} has no embeddings")));
        }
        let id = new_id();
        let session = Session::create_with_cache(id.clone(), dataset_id, entry.ds.clone(), config, entry.cache())?;
        if let Some(store) = &self.store {
            store.create_session(&session.export()).map_err(ApiError::internal)?;
        }
        self.sessions
            .write()
            .insert(id.clone(), Arc::new(SessionSlot::new(session)));
        Ok(id)
    }

    /// Applies `events` to a copy of the session, appends the new log
    /// records to disk and publishes the copy.
    pub fn apply_events(
        &self,
        session_id: &str,
        events: Vec<InteractionEvent>,
    ) -> Result<(StatusCode, BatchOutcome), ApiError> {
        let slot = self.slot(session_id)?;
        let _writer = slot.writer.lock();
        let mut s = Session::clone(&slot.snapshot());
        let before = s.records().len();
        let (mut accepted, mut duplicates) = (0, 0);
        let mut failure = None;
        for (i, e) in events.into_iter().enumerate() {
            match s.apply(e) {
                Ok(applied) => {
                    accepted += 1;
                    duplicates += applied.duplicate as usize;
                }
                Err(err) => {
                    failure = Some((i, err));
                    break;
                }
            }
        }
        if let Some(store) = &self.store {
            store
                .append_records(session_id, &s.records()[before..])
                .map_err(ApiError::internal)?;
        }
        let outcome = BatchOutcome {
            accepted,
            duplicates,
            suggestions: suggestions_of(&s),
            error: failure.as_ref().map(|(_, e)| e.to_string()),
            index: failure.as_ref().map(|(i, _)| *i),
        };
        *slot.current.write() = Arc::new(s);
        let status = failure.map_or(StatusCode::OK, |(_, e)| status_of(&e));
        Ok((status, outcome))
    }
}

fn new_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("not found: {}", what.into()))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        tracing::error!(error = %e, "internal error");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }
}

fn status_of(e: &CoreError) -> StatusCode {
    match e {
        CoreError::NotFound(_) => StatusCode::NOT_FOUND,
        CoreError::Protocol { .. } | CoreError::Expired | CoreError::Exhausted => StatusCode::CONFLICT,
        CoreError::NotApplicable(_) | CoreError::EmptySession | CoreError::Undefined(_) => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        CoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        Self::new(status_of(&e), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking model work off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route(
            "/datasets",
            post(upload_dataset).layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES)),
        )
        .route("/datasets/{id}/points", get(list_points))
        .route("/datasets/{id}/points/{pid}", get(get_point))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/events", post(post_events))
        .route("/sessions/{id}/suggestions", get(get_suggestions))
        .route("/sessions/{id}/export", get(get_export))
        .route("/sessions/{id}/metrics", get(get_metrics))
        .with_state(state)
}

async fn health(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "datasets": st.datasets.read().len(),
        "sessions": st.sessions.read().len(),
    }))
}

#[derive(Debug, Default, Deserialize)]
struct UploadParams {
    id: Option<String>,
    format: Option<String>,
    /// Hash embedding dimension; overrides the service embedder.
    dim: Option<usize>,
    seed: Option<u64>,
    /// Apply the keyword heuristic to fill the truth column.
    #[serde(default)]
    label: bool,
}

fn upload_format(params: &UploadParams, headers: &HeaderMap) -> ApiResult<Format> {
    if let Some(f) = &params.format {
        return Ok(f.parse()?);
    }
    let ct = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("");
    Ok(if ct.contains("json") {
        Format::Jsonl
    } else {
        Format::Csv
    })
}

async fn upload_dataset(
    State(st): State<Arc<AppState>>,
    Query(params): Query<UploadParams>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let format = upload_format(&params, &headers)?;
    let embedder = match (params.dim, params.seed, &st.cfg.embedder) {
        (None, None, e) => e.clone(),
        (dim, seed, Embedder::Hash { dim: d, seed: s }) => Embedder::Hash {
            dim: dim.unwrap_or(*d),
            seed: seed.unwrap_or(*s),
        },
        (dim, seed, Embedder::Table { .. }) => Embedder::Hash {
            dim: dim.unwrap_or(32),
            seed: seed.unwrap_or(0),
        },
    };
    blocking(move || {
        let mut ds = Dataset::load(body.as_ref(), format, None)?;
        if params.label {
            ds = ds.apply_label_heuristic(&forage_core::KeywordLexicon::default_symptoms())?;
        }
        let ds = embedder
            .embed(ds)
            .map_err(|e| ApiError::bad_request(format!("{e:#}")))?;
        let (n, labeled, incidence) = (ds.len(), ds.fully_labeled(), ds.incidence());
        let id = st.add_dataset(params.id, ds, &DatasetMeta { embedder })?;
        let body = json!({ "dataset_id": id, "points": n, "labeled": labeled, "incidence": incidence });
        Ok((StatusCode::CREATED, Json(body)).into_response())
    })
    .await
}

fn ndjson(body: String) -> Response {
    ([(header::CONTENT_TYPE, NDJSON)], body).into_response()
}

#[derive(Serialize)]
struct PointLocation {
    id: PointId,
    x: f64,
    y: f64,
}

/// Locations only; texts are fetched one at a time on hover.
async fn list_points(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let entry = st.dataset(&id)?;
    let mut out = String::with_capacity(entry.ds.len() * 48);
    for p in entry.ds.points() {
        let line = PointLocation {
            id: p.id,
            x: p.location[0],
            y: p.location[1],
        };
        out.push_str(&serde_json::to_string(&line).map_err(ApiError::internal)?);
        out.push('\n');
    }
    Ok(ndjson(out))
}

/// The point as shown in a tooltip. Ground truth is withheld so the
/// interface cannot leak it to the person labeling.
async fn get_point(
    State(st): State<Arc<AppState>>,
    Path((id, pid)): Path<(String, PointId)>,
) -> ApiResult<Json<serde_json::Value>> {
    let entry = st.dataset(&id)?;
    let p = entry
        .ds
        .get(pid)
        .ok_or_else(|| ApiError::not_found(format!("point {pid} in dataset {id}")))?;
    Ok(Json(
        json!({ "id": p.id, "x": p.location[0], "y": p.location[1], "text": p.text }),
    ))
}

#[derive(Debug, Deserialize)]
struct CreateSessionBody {
    dataset_id: String,
    policy: Option<String>,
    batch_size: Option<usize>,
    budget_ms: Option<u64>,
    #[serde(default)]
    strict_refresh: bool,
    /// Seed of the random policy.
    seed: Option<u64>,
}

async fn create_session(State(st): State<Arc<AppState>>, Json(body): Json<CreateSessionBody>) -> ApiResult<Response> {
    let mut policy = match &body.policy {
        Some(p) => p.parse::<PolicySpec>()?,
        None => st.cfg.default_policy,
    };
    if let Some(seed) = body.seed {
        policy = policy.with_seed(seed);
    }
    let defaults = SessionConfig::default();
    let config = SessionConfig {
        policy,
        batch_size: body.batch_size.unwrap_or(st.cfg.default_batch_size),
        budget_ms: body.budget_ms.unwrap_or(defaults.budget_ms),
        strict_refresh: body.strict_refresh,
        model: defaults.model,
    };
    blocking(move || {
        let id = st.create_session(&body.dataset_id, config)?;
        let body = json!({
            "session_id": id,
            "dataset_id": body.dataset_id,
            "policy": policy.to_string(),
            "batch_size": config.batch_size,
            "budget_ms": config.budget_ms,
        });
        Ok((StatusCode::CREATED, Json(body)).into_response())
    })
    .await
}

/// Accepts a JSON array of events or one event per line.
fn parse_events(body: &[u8]) -> ApiResult<Vec<InteractionEvent>> {
    let text = std::str::from_utf8(body).map_err(|e| ApiError::bad_request(format!("body is not UTF-8: {e}")))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(text).map_err(|e| ApiError::bad_request(format!("bad event batch: {e}")));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ApiError::bad_request(format!("bad event on line {}: {e}", i + 1)))
        })
        .collect()
}

async fn post_events(State(st): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let events = parse_events(&body)?;
    blocking(move || {
        let (status, outcome) = st.apply_events(&id, events)?;
        Ok((status, Json(outcome)).into_response())
    })
    .await
}

async fn get_suggestions(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let s = st.slot(&id)?.snapshot();
    Ok(Json(json!({
        "session_id": id,
        "suggestions": suggestions_of(&s),
        "labeled": s.observations().len(),
        "utility": s.utility(),
        "q": s.q(),
    })))
}

async fn get_export(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = st.slot(&id)?.snapshot();
    Ok(ndjson(s.export().to_jsonl_string()))
}

#[derive(Debug, Default, Deserialize)]
struct MetricsParams {
    /// Normalize rates by this many milliseconds instead of active time.
    fixed_ms: Option<u64>,
}

/// Utility and model state, plus the throughput metrics when the dataset
/// has ground truth. Metrics that do not apply are `null`.
async fn get_metrics(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(params): Query<MetricsParams>,
) -> ApiResult<Json<serde_json::Value>> {
    let s = st.slot(&id)?.snapshot();
    let base = params.fixed_ms.map_or(TimeBase::Active, TimeBase::Fixed);
    let export = s.export();
    let ds = s.dataset();
    let (mut metrics, mut purity) = (None, None);
    if ds.fully_labeled() {
        metrics = match analytics::throughput_metrics(&export, ds, base) {
            Ok(m) => Some(m),
            Err(CoreError::EmptySession) => None,
            Err(e) => return Err(e.into()),
        };
        purity = match analytics::suggestion_purity(&export, ds) {
            Ok(p) => Some(p),
            Err(CoreError::NotApplicable(_)) => None,
            Err(e) => return Err(e.into()),
        };
    }
    Ok(Json(json!({
        "session_id": id,
        "group": export.header.group(),
        "utility": s.utility(),
        "labeled": s.observations().len(),
        "events": s.log().len(),
        "q": s.q(),
        "ended": s.is_ended(),
        "metrics": metrics,
        "suggestion_purity": purity,
    })))
}

/// Binds `cfg.bind`, restores persisted state and serves until `shutdown`
/// resolves.
pub async fn serve(cfg: ServiceConfig, shutdown: impl Future<Output = ()> + Send + 'static) -> anyhow::Result<()> {
    let listener = bind(&cfg).await?;
    let state = tokio::task::spawn_blocking(move || AppState::new(cfg)).await??;
    serve_with(listener, state, shutdown).await
}

pub async fn bind(cfg: &ServiceConfig) -> anyhow::Result<TcpListener> {
    TcpListener::bind(cfg.bind)
        .await
        .with_context(|| format!("cannot listen on {}", cfg.bind))
}

/// Serves `state` until `shutdown` resolves. In-flight requests finish
/// before this returns, and every accepted event is on disk by then.
pub async fn serve_with(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    tracing::info!(sessions = state.sessions.read().len(), "shut down");
    Ok(())
}

impl AppState {
    pub fn has_dataset(&self, id: &str) -> bool {
        self.datasets.read().contains_key(id)
    }
}
