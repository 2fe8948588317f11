//! HTTP JSON API over interactive sessions.
//!
//! Sessions are independent and may run concurrently. Operations on one
//! session queue on its lock, which hands out access in arrival order.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::Engine;
use rellie_core::agent::Agent;
use rellie_core::checkpoint::load_checkpoint;
use rellie_core::image::ImageRGB;
use rellie_core::pipeline::{Decoding, Refinement};
use rellie_core::reward::{LossBreakdown, LossWeights};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex as SessionLock;

use crate::session::{Session, StateMeta};

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(30 * 60);
const MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;
const CHECKPOINT_EXT: &str = "ckpt";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Checkpoints are the `*.ckpt` files here; the id is the file stem.
    pub checkpoint_dir: PathBuf,
    pub idle_timeout: Duration,
    /// Keep state pixels on disk under this directory instead of in memory.
    pub spill_dir: Option<PathBuf>,
    pub refinement: Refinement,
}

impl ServiceConfig {
    pub fn new(checkpoint_dir: impl Into<PathBuf>) -> Self {
        Self {
            checkpoint_dir: checkpoint_dir.into(),
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
            spill_dir: None,
            refinement: Refinement::default(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id}"))
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<rellie_core::Error> for ApiError {
    fn from(e: rellie_core::Error) -> Self {
        use rellie_core::Error as E;
        let (status, code) = match &e {
            E::OutOfRange(_) => (StatusCode::UNPROCESSABLE_ENTITY, "out_of_range"),
            E::InvalidParameter(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_parameter"),
            E::UnsupportedFormat(_) | E::NotRgb(_) | E::Codec(_) => (StatusCode::BAD_REQUEST, "bad_image"),
            E::DenoiserSpawn(_) | E::DenoiserExit { .. } | E::DenoiserOutput(_) => (StatusCode::BAD_GATEWAY, "refinement_failed"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Entry {
    session: Arc<SessionLock<Session>>,
    last_used: Instant,
}

pub struct Service {
    cfg: ServiceConfig,
    sessions: Mutex<HashMap<String, Entry>>,
    agents: Mutex<HashMap<String, Arc<Agent>>>,
}

fn valid_checkpoint_id(id: &str) -> bool {
    !id.is_empty() && !id.starts_with('.') && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

impl Service {
    pub fn new(cfg: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            cfg,
            sessions: Mutex::new(HashMap::new()),
            agents: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table poisoned").len()
    }

    pub fn list_checkpoints(&self) -> ApiResult<Vec<String>> {
        let dir = std::fs::read_dir(&self.cfg.checkpoint_dir)
            .map_err(|e| ApiError::internal(format!("reading {}: {e}", self.cfg.checkpoint_dir.display())))?;
        let mut ids: Vec<String> = dir
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == CHECKPOINT_EXT))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .filter(|id| valid_checkpoint_id(id))
            .collect();
        ids.sort();
        Ok(ids)
    }

    fn checkpoint_path(&self, id: &str) -> PathBuf {
        self.cfg.checkpoint_dir.join(format!("{id}.{CHECKPOINT_EXT}"))
    }

    /// Loads (once) the agent of checkpoint `id`.
    fn agent(&self, id: &str) -> ApiResult<Arc<Agent>> {
        let unknown = || ApiError::new(StatusCode::NOT_FOUND, "unknown_checkpoint", format!("no checkpoint {id:?}"));
        if !valid_checkpoint_id(id) {
            return Err(unknown());
        }
        if let Some(a) = self.agents.lock().expect("agent cache poisoned").get(id) {
            return Ok(a.clone());
        }
        let agent = match load_checkpoint(self.checkpoint_path(id)) {
            Ok(ck) => Arc::new(ck.agent),
            Err(rellie_core::Error::NotFound(_)) => return Err(unknown()),
            Err(e) => {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "bad_checkpoint",
                    format!("checkpoint {id:?}: {e}"),
                ))
            }
        };
        self.agents
            .lock()
            .expect("agent cache poisoned")
            .insert(id.to_string(), agent.clone());
        Ok(agent)
    }

    /// Creates a session and returns its id.
    pub fn create_session(&self, image: &[u8], checkpoint: &str, seed: Option<u64>) -> ApiResult<(String, StateView)> {
        let input = ImageRGB::from_png_bytes(image).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_image", e.to_string()))?;
        let agent = self.agent(checkpoint)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let decoding = seed.map_or(Decoding::Greedy, |seed| Decoding::Sampled { seed });
        let spill = self.cfg.spill_dir.as_ref().map(|d| d.join(&id));
        let session = Session::new(checkpoint.to_string(), agent, input, decoding, self.cfg.refinement.clone(), spill)?;
        let view = StateView::of(&session, 0)?;
        self.sessions.lock().expect("session table poisoned").insert(
            id.clone(),
            Entry {
                session: Arc::new(SessionLock::new(session)),
                last_used: Instant::now(),
            },
        );
        log::info!("session {id} created from checkpoint {checkpoint}");
        Ok((id, view))
    }

    fn session(&self, id: &str) -> ApiResult<Arc<SessionLock<Session>>> {
        let mut table = self.sessions.lock().expect("session table poisoned");
        let entry = table.get_mut(id).ok_or_else(|| ApiError::unknown_session(id))?;
        entry.last_used = Instant::now();
        Ok(entry.session.clone())
    }

    /// Runs `op` on session `id` once every earlier operation on it has
    /// finished. The work runs on the blocking pool.
    pub async fn with_session<T, F>(&self, id: &str, op: F) -> ApiResult<T>
    where
        T: Send + 'static,
        F: FnOnce(&mut Session) -> ApiResult<T> + Send + 'static,
    {
        let lock = self.session(id)?;
        let mut guard = lock.lock_owned().await;
        tokio::task::spawn_blocking(move || op(&mut guard))
            .await
            .map_err(|e| ApiError::internal(format!("session task failed: {e}")))?
    }

    /// Drops sessions idle for longer than the timeout, except ones with an
    /// operation in progress. Returns how many were dropped.
    pub fn sweep(&self, now: Instant) -> usize {
        let mut table = self.sessions.lock().expect("session table poisoned");
        let before = table.len();
        table.retain(|id, e| {
            let idle = now.saturating_duration_since(e.last_used) > self.cfg.idle_timeout;
            let busy = e.session.try_lock().is_err();
            if idle && !busy {
                log::info!("session {id} expired");
            }
            !idle || busy
        });
        before - table.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StateMetadata {
    pub step: usize,
    /// Latest step in the session's history.
    pub current_step: usize,
    pub refined: bool,
    pub weights: LossWeights,
    pub mean_reward: f64,
    pub hash: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StateView {
    pub png_b64: String,
    pub breakdown: LossBreakdown,
    pub metadata: StateMetadata,
}

impl StateView {
    pub fn of(session: &Session, k: usize) -> ApiResult<Self> {
        let (img, meta): (ImageRGB, &StateMeta) = session.state(k)?;
        Ok(Self {
            png_b64: base64::engine::general_purpose::STANDARD.encode(img.to_png_bytes()?),
            breakdown: meta.breakdown,
            metadata: StateMetadata {
                step: meta.step,
                current_step: session.current(),
                refined: meta.refined,
                weights: meta.weights,
                mean_reward: meta.mean_reward,
                hash: meta.hash.clone(),
                checkpoint: session.checkpoint().to_string(),
            },
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreatedSession {
    pub id: String,
    pub state: StateView,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct StepRequest {
    #[serde(default)]
    pub apply_rf: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RewindRequest {
    pub to_step: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WeightsAck {
    pub weights: LossWeights,
}

async fn create(State(svc): State<Arc<Service>>, mut form: Multipart) -> ApiResult<(StatusCode, Json<CreatedSession>)> {
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", m);
    let (mut image, mut checkpoint, mut seed) = (None, None, None);
    while let Some(field) = form.next_field().await.map_err(|e| bad(e.to_string()))? {
        match field.name().unwrap_or_default() {
            "image" => image = Some(field.bytes().await.map_err(|e| bad(e.to_string()))?),
            "checkpoint" => checkpoint = Some(field.text().await.map_err(|e| bad(e.to_string()))?),
            "seed" => {
                let text = field.text().await.map_err(|e| bad(e.to_string()))?;
                seed = Some(text.trim().parse::<u64>().map_err(|_| bad(format!("seed must be an unsigned integer, got {text:?}")))?);
            }
            other => return Err(bad(format!("unexpected form field {other:?}"))),
        }
    }
    let image = image.ok_or_else(|| bad("missing form field \"image\"".into()))?;
    let checkpoint = checkpoint.ok_or_else(|| bad("missing form field \"checkpoint\"".into()))?;
    let worker = svc.clone();
    let (id, state) = tokio::task::spawn_blocking(move || worker.create_session(&image, checkpoint.trim(), seed))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(CreatedSession { id, state })))
}

async fn step(State(svc): State<Arc<Service>>, Path(id): Path<String>, Json(req): Json<StepRequest>) -> ApiResult<Json<StateView>> {
    let view = svc
        .with_session(&id, move |s| {
            let k = s.step(req.apply_rf)?.step;
            StateView::of(s, k)
        })
        .await?;
    Ok(Json(view))
}

async fn rewind(State(svc): State<Arc<Service>>, Path(id): Path<String>, Json(req): Json<RewindRequest>) -> ApiResult<Json<StateView>> {
    let view = svc
        .with_session(&id, move |s| {
            let k = s.rewind(req.to_step)?.step;
            StateView::of(s, k)
        })
        .await?;
    Ok(Json(view))
}

async fn reweight(State(svc): State<Arc<Service>>, Path(id): Path<String>, Json(weights): Json<LossWeights>) -> ApiResult<Json<WeightsAck>> {
    let weights = svc
        .with_session(&id, move |s| {
            s.reweight(weights)
                .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_weights", e.to_string()))?;
            Ok(s.weights())
        })
        .await?;
    Ok(Json(WeightsAck { weights }))
}

async fn state(State(svc): State<Arc<Service>>, Path((id, k)): Path<(String, usize)>) -> ApiResult<Json<StateView>> {
    Ok(Json(svc.with_session(&id, move |s| StateView::of(s, k)).await?))
}

async fn checkpoints(State(svc): State<Arc<Service>>) -> ApiResult<Json<Vec<String>>> {
    Ok(Json(svc.list_checkpoints()?))
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}/rewind", post(rewind))
        .route("/sessions/{id}/weights", put(reweight))
        .route("/sessions/{id}/state/{k}", get(state))
        .route("/checkpoints", get(checkpoints))
        .fallback(fallback)
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(svc)
}

/// Serves until ctrl-c, sweeping idle sessions in the background.
pub async fn serve(cfg: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    if !FsPath::new(&cfg.checkpoint_dir).is_dir() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint directory {} does not exist", cfg.checkpoint_dir.display()),
        ));
    }
    let svc = Service::new(cfg);
    let sweeper = {
        let svc = svc.clone();
        let period = (svc.config().idle_timeout / 4).clamp(Duration::from_secs(1), Duration::from_secs(60));
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            loop {
                tick.tick().await;
                svc.sweep(Instant::now());
            }
        })
    };
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let result = axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    sweeper.abort();
    result
}
