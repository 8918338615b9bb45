//! HTTP labeling service: run status, the pending query batch and label
//! submission. Also provides [`HumanOracle`], the oracle that publishes
//! batches here and blocks until an operator has labeled them.
//!
//! Endpoints:
//! - `GET /api/status` returns a [`StatusSnapshot`].
//! - `GET /api/queries` returns the pending [`QueryBatch`] or `204 No Content`.
//! - `POST /api/labels` accepts a [`LabelSubmission`] and returns a [`LabelAck`].

use std::collections::{BTreeMap, HashSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{info, warn};
use rlad_core::active::{LabelBudget, LabelStore, Oracle, OracleKind, QueryBatch};
use rlad_core::orchestrator::{EpisodeRecord, RunPhase, TrainObserver};
use serde::{Deserialize, Serialize};

pub const DEFAULT_ADDR: &str = "127.0.0.1:8723";
pub const ADDR_ENV: &str = "RLAD_ADDR";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid bind address {0:?}")]
    Address(String),
    #[error("a query batch is already pending")]
    Busy,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Bind address: the flag if given, then `RLAD_ADDR`, then the default.
pub fn resolve_addr(flag: Option<&str>) -> Result<SocketAddr, ServiceError> {
    let env = std::env::var(ADDR_ENV).ok();
    let raw = flag.or(env.as_deref()).unwrap_or(DEFAULT_ADDR);
    raw.parse().map_err(|_| ServiceError::Address(raw.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Idle,
    Training,
    AwaitingLabels,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusSnapshot {
    pub state: RunState,
    pub episode: usize,
    pub epsilon: Option<f64>,
    pub human_labels_used: usize,
    pub pseudo_labels_assigned: usize,
    /// Items in the pending batch; 0 when nothing is awaiting labels.
    pub batch_size: usize,
    pub metrics: Option<StatusMetrics>,
}

impl Default for StatusSnapshot {
    fn default() -> Self {
        StatusSnapshot {
            state: RunState::Idle,
            episode: 0,
            epsilon: None,
            human_labels_used: 0,
            pseudo_labels_assigned: 0,
            batch_size: 0,
            metrics: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmittedLabel {
    pub index: usize,
    /// Kept wide so out-of-range values reach validation instead of failing
    /// deserialization.
    pub label: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSubmission {
    pub batch_id: String,
    pub labels: Vec<SubmittedLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelAck {
    pub batch_id: String,
    pub accepted: usize,
    pub remaining: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SubmitError {
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug)]
struct Pending {
    batch: QueryBatch,
    labels: BTreeMap<usize, u8>,
}

#[derive(Debug, Default)]
struct Inner {
    status: StatusSnapshot,
    pending: Option<Pending>,
    completed: Option<(String, Vec<(usize, u8)>)>,
    labeled: HashSet<usize>,
}

/// Shared state between the HTTP handlers and the training thread.
#[derive(Clone, Default)]
pub struct LabelingService {
    shared: Arc<(Mutex<Inner>, Condvar)>,
}

impl LabelingService {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.shared.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn status(&self) -> StatusSnapshot {
        self.lock().status.clone()
    }

    pub fn update_status(&self, f: impl FnOnce(&mut StatusSnapshot)) {
        f(&mut self.lock().status);
    }

    pub fn pending(&self) -> Option<QueryBatch> {
        self.lock().pending.as_ref().map(|p| p.batch.clone())
    }

    pub fn publish(&self, batch: QueryBatch) -> Result<(), ServiceError> {
        let mut inner = self.lock();
        if inner.pending.is_some() {
            return Err(ServiceError::Busy);
        }
        info!("published batch {} with {} items", batch.batch_id, batch.len());
        inner.status.state = RunState::AwaitingLabels;
        inner.status.batch_size = batch.len();
        inner.completed = None;
        inner.pending = Some(Pending {
            batch,
            labels: BTreeMap::new(),
        });
        Ok(())
    }

    /// Validate a submission as a whole, then record it. Completing the
    /// pending batch wakes the trainer.
    pub fn submit(&self, sub: &LabelSubmission) -> Result<LabelAck, SubmitError> {
        let mut inner = self.lock();
        let Inner {
            pending, labeled, ..
        } = &mut *inner;
        let pending = match pending {
            Some(p) if p.batch.batch_id == sub.batch_id => p,
            _ => return Err(SubmitError::Conflict(format!("no pending batch {:?}", sub.batch_id))),
        };
        if sub.labels.is_empty() {
            return Err(SubmitError::Invalid("submission carries no labels".into()));
        }
        let members: HashSet<usize> = pending.batch.items.iter().map(|i| i.index).collect();
        let mut seen = HashSet::new();
        for l in &sub.labels {
            if !(l.label == 0 || l.label == 1) {
                return Err(SubmitError::Invalid(format!("label {} for index {} is not 0 or 1", l.label, l.index)));
            }
            if !members.contains(&l.index) {
                return Err(SubmitError::Invalid(format!("index {} is not in batch {}", l.index, sub.batch_id)));
            }
            if !seen.insert(l.index) || pending.labels.contains_key(&l.index) || labeled.contains(&l.index) {
                return Err(SubmitError::Conflict(format!("index {} already labeled", l.index)));
            }
        }
        for l in &sub.labels {
            pending.labels.insert(l.index, l.label as u8);
        }
        let remaining = members.len() - pending.labels.len();
        let ack = LabelAck {
            batch_id: sub.batch_id.clone(),
            accepted: sub.labels.len(),
            remaining,
            complete: remaining == 0,
        };
        if remaining == 0 {
            let done = inner.pending.take().expect("pending batch present");
            let answers: Vec<(usize, u8)> = done.batch.items.iter().map(|i| (i.index, done.labels[&i.index])).collect();
            inner.labeled.extend(answers.iter().map(|a| a.0));
            inner.completed = Some((done.batch.batch_id, answers));
            inner.status.state = RunState::Training;
            inner.status.batch_size = 0;
            self.shared.1.notify_all();
        }
        Ok(ack)
    }

    /// Block until batch `batch_id` is fully labeled. On timeout the batch
    /// is withdrawn so a later one can be published.
    pub fn wait_for_answers(&self, batch_id: &str, timeout: Option<Duration>) -> Option<Vec<(usize, u8)>> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut inner = self.lock();
        loop {
            if let Some((id, _)) = &inner.completed {
                if id == batch_id {
                    return inner.completed.take().map(|c| c.1);
                }
            }
            match deadline {
                None => inner = self.shared.1.wait(inner).unwrap_or_else(|p| p.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        if inner.pending.as_ref().is_some_and(|p| p.batch.batch_id == batch_id) {
                            inner.pending = None;
                            inner.status.state = RunState::Training;
                            inner.status.batch_size = 0;
                        }
                        return None;
                    }
                    inner = self.shared.1.wait_timeout(inner, d - now).unwrap_or_else(|p| p.into_inner()).0;
                }
            }
        }
    }
}

/// Oracle backed by an operator labeling batches through the service.
pub struct HumanOracle {
    service: LabelingService,
    timeout: Option<Duration>,
}

impl HumanOracle {
    pub fn new(service: LabelingService, timeout: Option<Duration>) -> Self {
        HumanOracle { service, timeout }
    }
}

impl Oracle for HumanOracle {
    fn kind(&self) -> OracleKind {
        OracleKind::Human
    }

    fn answer(&mut self, batch: &QueryBatch) -> rlad_core::Result<Vec<(usize, u8)>> {
        let id = batch.batch_id.clone();
        self.service
            .publish(batch.clone())
            .map_err(|e| rlad_core::Error::Query(e.to_string()))?;
        self.service.wait_for_answers(&id, self.timeout).ok_or_else(|| {
            warn!("batch {id} timed out");
            rlad_core::Error::Query(format!("labels for batch {id} not received before timeout"))
        })
    }
}

/// Mirrors training progress into the status snapshot.
pub struct StatusObserver {
    service: LabelingService,
}

impl StatusObserver {
    pub fn new(service: LabelingService) -> Self {
        StatusObserver { service }
    }
}

impl TrainObserver for StatusObserver {
    fn on_phase(&mut self, phase: RunPhase) {
        self.service.update_status(|s| {
            s.state = match phase {
                RunPhase::Warmup | RunPhase::Training => RunState::Training,
                RunPhase::Done => RunState::Done,
            };
        });
    }

    fn on_episode(&mut self, record: &EpisodeRecord, _store: &LabelStore, _budget: &LabelBudget) {
        self.service.update_status(|s| {
            s.episode = record.episode;
            s.epsilon = Some(record.epsilon);
            s.human_labels_used = record.human_labels_used;
            s.pseudo_labels_assigned = record.pseudo_labels_assigned;
            s.metrics = Some(StatusMetrics {
                precision: record.precision,
                recall: record.recall,
                f1: record.f1,
            });
        });
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<SubmitError> for ApiError {
    fn from(e: SubmitError) -> Self {
        match e {
            SubmitError::Conflict(m) => ApiError(StatusCode::CONFLICT, m),
            SubmitError::Invalid(m) => ApiError(StatusCode::UNPROCESSABLE_ENTITY, m),
        }
    }
}

async fn get_status(State(svc): State<LabelingService>) -> Json<StatusSnapshot> {
    Json(svc.status())
}

async fn get_queries(State(svc): State<LabelingService>) -> Response {
    match svc.pending() {
        Some(batch) => Json(batch).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn post_labels(
    State(svc): State<LabelingService>,
    body: Result<Json<LabelSubmission>, JsonRejection>,
) -> Result<Json<LabelAck>, ApiError> {
    let Json(sub) = body.map_err(|e| ApiError(e.status(), e.body_text()))?;
    Ok(Json(svc.submit(&sub)?))
}

pub fn router(service: LabelingService) -> Router {
    Router::new()
        .route("/api/status", get(get_status))
        .route("/api/queries", get(get_queries))
        .route("/api/labels", post(post_labels))
        .with_state(service)
}

/// [`router`] plus static files from `ui_dir` at the root path.
pub fn router_with_ui(service: LabelingService, ui_dir: PathBuf) -> Router {
    router(service).fallback_service(tower_http::services::ServeDir::new(ui_dir))
}

pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> Result<(), ServiceError> {
    info!("labeling service listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
