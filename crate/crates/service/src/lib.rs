//! HTTP session service: interactive prompting against a loaded checkpoint.
//!
//! Endpoints (JSON): `POST /sessions`, `GET /sessions`, `GET|DELETE
//! /sessions/{id}`, `POST /sessions/{id}/prompts`, `POST
//! /sessions/{id}/sample-prompts`, `POST /sessions/{id}/infer`, `GET
//! /sessions/{id}/memory`, `GET /healthz`, `GET /model`. State ids in
//! requests and responses are unified across granularity levels.

mod error;
mod session;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::sync::{Mutex, RwLock, Semaphore};
use tower_http::cors::{Any, CorsLayer};

use promptseg::dataio::{choose_windows, sample_prompts_in, Prompt, SamplerConfig, Subsequence};
use promptseg::membank::TokenKind;
use promptseg::model::{load_checkpoint, Model, ModelConfig};
use promptseg::model::CheckpointMeta;
use promptseg::rng::stream;

pub use error::ApiError;
pub use session::{Engine, Event, LevelPrediction, LogStore, PredictionResponse, Session};

#[derive(Clone, Debug)]
pub struct ServiceOptions {
    /// Where session event logs live; `None` keeps sessions in memory only.
    pub data_dir: Option<PathBuf>,
    /// Subsequences (with ground truth) that sessions may reference by index.
    pub bundled: Vec<Subsequence>,
    /// Concurrent model computations.
    pub max_concurrent: usize,
    /// How long a request waits for a model slot before answering 503.
    pub busy_timeout: Duration,
    /// Allowed CORS origin; `None` allows any.
    pub cors_origin: Option<String>,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            data_dir: None,
            bundled: Vec::new(),
            max_concurrent: std::thread::available_parallelism().map_or(1, |n| n.get()),
            busy_timeout: Duration::from_secs(30),
            cors_origin: None,
        }
    }
}

pub struct AppState {
    engine: Arc<Engine>,
    checkpoint_hash: String,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    logs: LogStore,
    bundled: Vec<Subsequence>,
    permits: Arc<Semaphore>,
    busy_timeout: Duration,
    cors_origin: Option<String>,
}

/// SHA-256 over the checkpoint's files in name order.
pub fn checkpoint_hash(dir: impl AsRef<Path>) -> std::io::Result<String> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    let mut h = Sha256::new();
    for p in paths.iter().filter(|p| p.is_file()) {
        h.update(p.file_name().unwrap_or_default().as_encoded_bytes());
        h.update(fs::read(p)?);
    }
    Ok(hex::encode(h.finalize()))
}

impl AppState {
    /// Wrap a model and restore every session found in the data directory.
    pub fn new(
        model: Model<f32>,
        meta: CheckpointMeta,
        checkpoint_hash: String,
        options: ServiceOptions,
    ) -> Result<Arc<Self>, String> {
        let spec = meta
            .window_spec
            .ok_or("checkpoint records no window spec; it cannot serve sessions")?;
        if meta.granularities.is_empty() {
            return Err("checkpoint records no granularity levels".into());
        }
        if spec.window_len != model.config().window_len {
            return Err(format!(
                "checkpoint window spec T={} disagrees with the model's T={}",
                spec.window_len,
                model.config().window_len
            ));
        }
        let engine = Engine {
            model,
            spec,
            granularities: meta.granularities,
            channel_names: meta.channel_names,
        };
        for s in &options.bundled {
            if s.len() != engine.len() || s.channels != engine.channels() || s.labels.len() != engine.granularities.len() {
                return Err(format!("bundled subsequence {} does not match the checkpoint", s.key()));
            }
        }
        let logs = LogStore::new(options.data_dir.clone()).map_err(|e| format!("data directory: {e}"))?;
        let mut sessions = HashMap::new();
        for events in logs.load_all().map_err(|e| format!("session logs: {e}"))? {
            let s = Session::replay(&engine, events).map_err(|e| format!("session replay: {e}"))?;
            sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
        }
        Ok(Arc::new(Self {
            engine: Arc::new(engine),
            checkpoint_hash,
            sessions: RwLock::new(sessions),
            logs,
            bundled: options.bundled,
            permits: Arc::new(Semaphore::new(options.max_concurrent.max(1))),
            busy_timeout: options.busy_timeout,
            cors_origin: options.cors_origin,
        }))
    }

    pub fn from_checkpoint(dir: impl AsRef<Path>, options: ServiceOptions) -> Result<Arc<Self>, String> {
        let dir = dir.as_ref();
        let (model, meta) = load_checkpoint(dir).map_err(|e| e.to_string())?;
        let hash = checkpoint_hash(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        Self::new(model, meta, hash, options)
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    async fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    /// Run model work off the async runtime, holding one of the model slots.
    async fn compute<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        F: FnOnce(&Engine) -> Result<T, ApiError> + Send + 'static,
        T: Send + 'static,
    {
        let permit = tokio::time::timeout(self.busy_timeout, self.permits.clone().acquire_owned())
            .await
            .map_err(|_| ApiError::busy())?
            .map_err(|_| ApiError::busy())?;
        let engine = self.engine.clone();
        let out = tokio::task::spawn_blocking(move || {
            let _permit = permit;
            f(&engine)
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
        out
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = match &state.cors_origin {
        Some(o) => match HeaderValue::from_str(o) {
            Ok(v) => CorsLayer::new().allow_origin(v),
            Err(_) => CorsLayer::new(),
        },
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods(Any)
    .allow_headers(Any);
    Router::new()
        .route("/healthz", get(healthz))
        .route("/model", get(model_info))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/prompts", post(add_prompts))
        .route("/sessions/{id}/sample-prompts", post(sample_prompts))
        .route("/sessions/{id}/infer", post(infer))
        .route("/sessions/{id}/memory", get(memory))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .layer(cors)
        .with_state(state)
}

/// Serve until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

type ApiResult<T> = Result<T, ApiError>;

/// JSON body extraction with errors in the service's error shape.
struct Body<T>(T);

impl<S, T> axum::extract::FromRequest<S> for Body<T>
where
    T: serde::de::DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: axum::extract::Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(ApiError::new(e.status(), "bad_request", e.body_text())),
        }
    }
}

async fn healthz(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "checkpoint_sha256": st.checkpoint_hash,
    }))
}

#[derive(Serialize)]
struct ModelInfo<'a> {
    config: &'a ModelConfig,
    window_spec: promptseg::dataio::WindowSpec,
    subsequence_len: usize,
    granularities: &'a [promptseg::dataio::Granularity],
    channel_names: &'a [String],
    bundled: usize,
}

async fn model_info(State(st): State<Arc<AppState>>) -> Json<Value> {
    let e = &st.engine;
    Json(json!(ModelInfo {
        config: e.model.config(),
        window_spec: e.spec,
        subsequence_len: e.len(),
        granularities: &e.granularities,
        channel_names: &e.channel_names,
        bundled: st.bundled.len(),
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    /// `L_s` rows of `C` values.
    data: Option<Vec<Vec<f64>>>,
    /// Optional ground truth, one unified-id sequence per level.
    truth: Option<Vec<Vec<usize>>>,
    bundled: Option<usize>,
    #[serde(default)]
    level: usize,
}

#[derive(Serialize)]
struct SessionSummary {
    session_id: String,
    length: usize,
    channels: usize,
    level: usize,
    bundled: Option<usize>,
    has_truth: bool,
    bank_size: usize,
    infer_count: usize,
    prompts: Vec<Prompt>,
    created_at: u64,
    updated_at: u64,
}

fn summary(s: &Session) -> SessionSummary {
    SessionSummary {
        session_id: s.id.clone(),
        length: s.subseq.len(),
        channels: s.subseq.channels,
        level: s.level,
        bundled: s.bundled,
        has_truth: s.has_truth,
        bank_size: s.bank.len(),
        infer_count: s.infer_count,
        prompts: s.prompts().cloned().collect(),
        created_at: s.created_at,
        updated_at: s.updated_at,
    }
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    Body(req): Body<CreateRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let e = &st.engine;
    let (c, len) = (e.channels(), e.len());
    let (data, truth, bundled) = match (req.data, req.bundled) {
        (Some(rows), None) => {
            if let Some(r) = rows.iter().position(|r| r.len() != c) {
                return Err(ApiError::bad_request(format!(
                    "row {r} has {} channels, expected C = {c}",
                    rows[r].len()
                )));
            }
            if rows.len() > len {
                return Err(ApiError::new(
                    StatusCode::PAYLOAD_TOO_LARGE,
                    "too_long",
                    format!("{} timesteps exceed one subsequence of {len}; slice the series", rows.len()),
                ));
            }
            if rows.len() < len {
                return Err(ApiError::bad_request(format!(
                    "{} timesteps given, a session needs exactly {len}",
                    rows.len()
                )));
            }
            (rows.concat(), req.truth, None)
        }
        (None, Some(i)) => {
            if req.truth.is_some() {
                return Err(ApiError::bad_request("bundled sessions carry their own ground truth"));
            }
            let s = st.bundled.get(i).ok_or_else(|| {
                ApiError::new(
                    StatusCode::NOT_FOUND,
                    "not_found",
                    format!("bundled subsequence {i} does not exist ({} available)", st.bundled.len()),
                )
            })?;
            (s.data.clone(), Some(s.labels.clone()), Some(i))
        }
        _ => return Err(ApiError::bad_request("give exactly one of `data` and `bundled`")),
    };
    let id = format!("{:032x}", rand::thread_rng().gen::<u128>());
    let event = Event::Created {
        id: id.clone(),
        at: session::now_millis(),
        level: req.level,
        data,
        truth,
        bundled,
        sample_seed: rand::thread_rng().gen(),
    };
    let s = Session::create(e, event.clone())?;
    st.logs.append(&id, &event)?;
    let body = json!(summary(&s));
    st.sessions.write().await.insert(id, Arc::new(Mutex::new(s)));
    Ok((StatusCode::CREATED, Json(body)))
}

async fn list_sessions(State(st): State<Arc<AppState>>) -> Json<Value> {
    let sessions: Vec<_> = st.sessions.read().await.values().cloned().collect();
    let mut out = Vec::with_capacity(sessions.len());
    for s in sessions {
        out.push(summary(&*s.lock().await));
    }
    out.sort_by(|a, b| (a.created_at, &a.session_id).cmp(&(b.created_at, &b.session_id)));
    Json(json!({ "sessions": out }))
}

async fn get_session(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let s = st.session(&id).await?;
    let s = s.lock().await;
    Ok(Json(json!(summary(&s))))
}

async fn delete_session(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<StatusCode> {
    let removed = st.sessions.write().await.remove(&id);
    if removed.is_none() {
        return Err(ApiError::not_found(&id));
    }
    st.logs.remove(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptRequest {
    prompts: Vec<Prompt>,
}

#[derive(Serialize)]
struct WriteResponse {
    bank_size: usize,
    iteration: usize,
    prompts: Vec<Prompt>,
}

/// Validate, encode, log, then write: a failure at any step leaves the
/// session untouched.
async fn write_prompts(st: &Arc<AppState>, id: &str, prompts: Option<Vec<Prompt>>, sample: Option<SampleRequest>) -> ApiResult<Json<Value>> {
    let handle = st.session(id).await?;
    let mut s = handle.lock().await;
    let prompts = match (prompts, sample) {
        (Some(p), _) => p,
        (None, Some(req)) => sample_for(&s, &st.engine, &req)?,
        (None, None) => return Err(ApiError::invalid("no prompts given")),
    };
    s.validate_prompts(&st.engine, &prompts)?;
    let event = Event::Prompts {
        at: session::now_millis(),
        iteration: s.next_iteration(),
        prompts: prompts.clone(),
    };
    let snapshot = s.clone();
    let ev = event.clone();
    let tokens = st.compute(move |e| snapshot.encode(e, &ev)).await?;
    st.logs.append(id, &event)?;
    let iteration = s.next_iteration();
    s.commit(event, tokens)?;
    Ok(Json(json!(WriteResponse {
        bank_size: s.bank.len(),
        iteration,
        prompts,
    })))
}

async fn add_prompts(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Body(req): Body<PromptRequest>,
) -> ApiResult<Json<Value>> {
    write_prompts(&st, &id, Some(req.prompts), None).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRequest {
    count: usize,
    level: Option<usize>,
    kind_mix: Option<f64>,
}

/// Ground-truth prompts at unused timestamps, for sessions with truth.
fn sample_for(s: &Session, e: &Engine, req: &SampleRequest) -> ApiResult<Vec<Prompt>> {
    if !s.has_truth {
        return Err(ApiError::invalid("session has no ground truth to sample prompts from"));
    }
    if req.count == 0 {
        return Err(ApiError::invalid("count must be at least 1"));
    }
    let level = req.level.unwrap_or(s.level);
    if level >= e.granularities.len() {
        return Err(ApiError::invalid(format!("level {level} does not exist")));
    }
    let cfg = SamplerConfig {
        kind_mix: req.kind_mix.unwrap_or(SamplerConfig::default().kind_mix),
        n_neg: Some(SamplerConfig::default().n_neg.unwrap_or(3).min(e.model.config().n_neg_max)),
        ..SamplerConfig::default()
    };
    if !(0.0..=1.0).contains(&cfg.kind_mix) {
        return Err(ApiError::invalid("kind_mix must lie in [0, 1]"));
    }
    let mut rng = stream(s.sample_seed, &[s.log.len() as u64]);
    let windows = choose_windows(&e.spec, cfg.window_concentration.min(e.spec.windows), &mut rng)
        .map_err(|err| ApiError::invalid(err.to_string()))?;
    // a label and a boundary prompt may share a timestamp, but sampling
    // keeps to fresh timestamps
    sample_prompts_in(&s.subseq, &e.spec, &windows, level, req.count, &s.used_timestamps(), &cfg, &mut rng)
        .map_err(|err| ApiError::invalid(err.to_string()))
}

async fn sample_prompts(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Body(req): Body<SampleRequest>,
) -> ApiResult<Json<Value>> {
    write_prompts(&st, &id, None, Some(req)).await
}

async fn infer(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<PredictionResponse>> {
    let handle = st.session(&id).await?;
    let mut s = handle.lock().await;
    let snapshot = s.clone();
    let prediction = st.compute(move |e| snapshot.predict(e)).await?;
    let event = Event::Infer { at: session::now_millis() };
    st.logs.append(&id, &event)?;
    s.commit(event, Vec::new())?;
    Ok(Json(prediction))
}

#[derive(Deserialize)]
struct MemoryQuery {
    #[serde(default)]
    vectors: bool,
}

#[derive(Serialize)]
struct TokenView {
    anchor: usize,
    kind: TokenKind,
    iteration: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    vector: Option<Vec<f32>>,
}

async fn memory(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<MemoryQuery>,
) -> ApiResult<Json<Value>> {
    let handle = st.session(&id).await?;
    let s = handle.lock().await;
    let mut per_iteration: BTreeMap<usize, usize> = BTreeMap::new();
    let tokens: Vec<TokenView> = s
        .bank
        .tokens()
        .map(|t| {
            *per_iteration.entry(t.iteration).or_default() += 1;
            TokenView {
                anchor: t.anchor,
                kind: t.kind,
                iteration: t.iteration,
                vector: q.vectors.then(|| t.vector.clone()),
            }
        })
        .collect();
    Ok(Json(json!({
        "session_id": s.id,
        "count": s.bank.len(),
        "dim": s.bank.dim(),
        "iterations": per_iteration,
        "tokens": tokens,
    })))
}
