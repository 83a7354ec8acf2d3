//! JSON HTTP API over the case pipeline and the expert review queue.
//!
//! Cases run on the blocking pool; the loaded [`System`] is shared read-only.
//! When a bearer token is configured every route except `/health` requires it.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use safedx_core::domain::{PatientRecord, Vitals};
use safedx_core::pipeline::{
    CaseOutcome, CaseStatus, LabelDecision, QueueError, Resolution, ReviewQueue, ReviewStatus, Stage, System,
};

/// Completed outcomes kept for `GET /cases/{id}`; the oldest are evicted first.
pub const CASE_CACHE_LIMIT: usize = 10_000;

#[derive(Debug, Default, Clone, Serialize)]
pub struct Summary {
    pub cases: u64,
    pub completed: u64,
    pub flagged: u64,
    pub failed: u64,
    pub pharmacist_flags: u64,
    pub incidents: u64,
    pub mean_latency_ms: f64,
    pub flag_rate: Option<f64>,
    pub queue_pending: usize,
    pub queue_resolved: usize,
}

#[derive(Default)]
struct Cases {
    by_id: HashMap<String, CaseOutcome>,
    order: VecDeque<String>,
}

#[derive(Default)]
struct Stats {
    summary: Summary,
    total_latency_ms: f64,
    next_id: u64,
}

pub struct AppState {
    system: Arc<System>,
    token: Option<String>,
    cases: RwLock<Cases>,
    stats: Mutex<Stats>,
}

impl AppState {
    /// The system must have a review queue; flagged cases have nowhere else to go.
    pub fn new(system: System, token: Option<String>) -> Result<Self, String> {
        if system.queue.is_none() {
            return Err("the service needs a review queue journal (set queue_journal)".into());
        }
        Ok(Self {
            system: Arc::new(system),
            token: token.filter(|t| !t.is_empty()),
            cases: RwLock::default(),
            stats: Mutex::default(),
        })
    }

    fn queue(&self) -> &ReviewQueue {
        self.system.queue.as_ref().expect("checked in AppState::new")
    }

    fn record(&self, outcome: &CaseOutcome) {
        let mut stats = self.stats.lock().unwrap_or_else(|p| p.into_inner());
        let s = &mut stats.summary;
        s.cases += 1;
        match outcome.status {
            CaseStatus::Completed => s.completed += 1,
            CaseStatus::Flagged => s.flagged += 1,
            CaseStatus::Failed => s.failed += 1,
        }
        s.pharmacist_flags += outcome.safety.as_ref().is_some_and(|r| r.pharmacist_flag) as u64;
        s.incidents += outcome.incidents.len() as u64;
        stats.total_latency_ms += outcome.timings.iter().map(|t| t.micros as f64).sum::<f64>() / 1000.0;
    }

    fn remember(&self, outcome: CaseOutcome) {
        let mut cases = self.cases.write().unwrap_or_else(|p| p.into_inner());
        if cases.by_id.insert(outcome.case_id.clone(), outcome.clone()).is_none() {
            cases.order.push_back(outcome.case_id);
        }
        while cases.order.len() > CASE_CACHE_LIMIT {
            if let Some(old) = cases.order.pop_front() {
                cases.by_id.remove(&old);
            }
        }
    }

    fn known(&self, id: &str) -> bool {
        self.cases.read().unwrap_or_else(|p| p.into_inner()).by_id.contains_key(id) || self.queue().get(id).is_some()
    }
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<QueueError> for ApiError {
    fn from(e: QueueError) -> Self {
        let status = match &e {
            QueueError::Unknown(_) => StatusCode::NOT_FOUND,
            QueueError::AlreadyResolved(_) | QueueError::Duplicate(_) => StatusCode::CONFLICT,
            QueueError::InvalidResolution(_) => StatusCode::UNPROCESSABLE_ENTITY,
            QueueError::Io { .. } | QueueError::Corrupt { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

/// `POST /cases` body. The id is generated when omitted.
#[derive(Debug, Deserialize)]
pub struct CaseRequest {
    #[serde(default)]
    pub id: Option<String>,
    pub symptom_text: String,
    #[serde(default)]
    pub vitals: Vitals,
    /// Optional reference treatment; adds the SCGS block to the outcome.
    #[serde(default)]
    pub reference: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct QueueFilter {
    #[serde(default)]
    pub status: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct ResolveRequest {
    pub resolver: String,
    #[serde(flatten)]
    pub resolution: Resolution,
}

async fn create_case(
    State(app): State<Arc<AppState>>,
    Json(req): Json<CaseRequest>,
) -> Result<Response, ApiError> {
    let id = match req.id.filter(|s| !s.trim().is_empty()) {
        Some(id) => id,
        None => {
            let mut stats = app.stats.lock().unwrap_or_else(|p| p.into_inner());
            stats.next_id += 1;
            format!("case-{:06}", stats.next_id)
        }
    };
    if app.known(&id) {
        return Err(ApiError(StatusCode::CONFLICT, format!("case {id} already exists")));
    }
    let record = PatientRecord {
        id,
        symptom_text: req.symptom_text,
        vitals: req.vitals,
    };
    let worker = app.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        worker.system.run_case_with_reference(&record, req.reference.as_deref())
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("case worker failed: {e}")))?;
    app.record(&outcome);
    app.remember(outcome.clone());
    let status = match &outcome.failure {
        None => StatusCode::OK,
        Some(f) if f.stage == Stage::Validate => StatusCode::UNPROCESSABLE_ENTITY,
        Some(_) => StatusCode::INTERNAL_SERVER_ERROR,
    };
    Ok((status, Json(outcome)).into_response())
}

async fn get_case(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<CaseOutcome>, ApiError> {
    if let Some(o) = app.cases.read().unwrap_or_else(|p| p.into_inner()).by_id.get(&id) {
        return Ok(Json(o.clone()));
    }
    app.queue()
        .get(&id)
        .map(|item| Json(item.outcome))
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no case {id}")))
}

async fn list_queue(
    State(app): State<Arc<AppState>>,
    Query(filter): Query<QueueFilter>,
) -> Result<Response, ApiError> {
    let status = match filter.status.as_deref() {
        None | Some("") | Some("all") => None,
        Some("pending") => Some(ReviewStatus::Pending),
        Some("resolved") => Some(ReviewStatus::Resolved),
        Some(other) => {
            return Err(ApiError(
                StatusCode::BAD_REQUEST,
                format!("unknown status {other:?}; use pending, resolved or all"),
            ))
        }
    };
    Ok(Json(app.queue().list(status)).into_response())
}

async fn resolve(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<ResolveRequest>,
) -> Result<Response, ApiError> {
    if let LabelDecision::Overridden { label } = &req.resolution.label {
        if app.system.model.labels.index_of(label).is_none() {
            return Err(ApiError(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("unknown label {label:?}"),
            ));
        }
    }
    let item = app.queue().resolve(&id, req.resolution, &req.resolver)?;
    Ok(Json(item).into_response())
}

async fn health(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let (pending, resolved) = app.queue().counts();
    Json(serde_json::json!({
        "status": "ok",
        "labels": app.system.model.labels.len(),
        "index_entries": app.system.index.len(),
        "threshold": app.system.threshold,
        "queue": { "pending": pending, "resolved": resolved },
    }))
}

async fn summary(State(app): State<Arc<AppState>>) -> Json<Summary> {
    let stats = app.stats.lock().unwrap_or_else(|p| p.into_inner());
    let mut s = stats.summary.clone();
    if s.cases > 0 {
        s.mean_latency_ms = stats.total_latency_ms / s.cases as f64;
        let decided = s.completed + s.flagged;
        s.flag_rate = (decided > 0).then(|| s.flagged as f64 / decided as f64);
    }
    (s.queue_pending, s.queue_resolved) = app.queue().counts();
    Json(s)
}

async fn require_token(State(app): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let Some(token) = &app.token else {
        return next.run(req).await;
    };
    if req.uri().path() == "/health" {
        return next.run(req).await;
    }
    let ok = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == token);
    if ok {
        next.run(req).await
    } else {
        ApiError(StatusCode::UNAUTHORIZED, "missing or invalid bearer token".into()).into_response()
    }
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/cases", post(create_case))
        .route("/cases/{id}", get(get_case))
        .route("/queue", get(list_queue))
        .route("/queue/{id}/resolve", post(resolve))
        .route("/health", get(health))
        .route("/metrics/summary", get(summary))
        .layer(middleware::from_fn_with_state(app.clone(), require_token))
        .with_state(app)
}

/// Serves until ctrl-c.
pub async fn serve(app: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
