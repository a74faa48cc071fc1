//! HTTP labeling session.
//!
//! The training loop publishes one embedding snapshot at a time and parks
//! until the labeler posts a ranking (or the session is aborted). Labeling
//! time runs from the first snapshot fetch to the accepted submission.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use prefviz_core::cluster_oracle::validate_clusters;
use prefviz_core::embed_viz::EmbeddingSnapshot;
use prefviz_core::env::{EnvSpec, EnvState};
use prefviz_core::orchestrator::{LabelRequest, Labeler, LiveSubmission};
use prefviz_core::render::render;
use prefviz_core::{Error, StateId};

/// Seconds since some fixed origin.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

pub struct SystemClock(Instant);

impl SystemClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Hand-advanced clock for tests.
#[derive(Clone, Default)]
pub struct ManualClock(Arc<Mutex<f64>>);

impl ManualClock {
    pub fn advance(&self, seconds: f64) {
        *self.0.lock().expect("clock lock") += seconds;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        *self.0.lock().expect("clock lock")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Training,
    AwaitingLabels,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusBody {
    pub state: SessionState,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingBody {
    pub clusters: Vec<Vec<StateId>>,
}

enum SessionMsg {
    Submission(LiveSubmission),
    Abort,
}

struct Published {
    snapshot: EmbeddingSnapshot,
    spec: EnvSpec,
    states: HashMap<StateId, EnvState>,
    published_at: f64,
    loaded_at: Option<f64>,
    accepted: bool,
}

struct Inner {
    state: SessionState,
    iteration: usize,
    current: Option<Published>,
}

struct Shared {
    inner: Mutex<Inner>,
    tx: Mutex<Sender<SessionMsg>>,
    clock: Box<dyn Clock>,
}

/// Server-side handle on the session; cheap to clone.
#[derive(Clone)]
pub struct Session(Arc<Shared>);

/// Training-loop side of the session.
pub struct SessionLabeler {
    session: Session,
    rx: Receiver<SessionMsg>,
}

/// A connected session/labeler pair.
pub fn session(clock: impl Clock + 'static) -> (Session, SessionLabeler) {
    let (tx, rx) = mpsc::channel();
    let shared = Shared {
        inner: Mutex::new(Inner { state: SessionState::Training, iteration: 0, current: None }),
        tx: Mutex::new(tx),
        clock: Box::new(clock),
    };
    let s = Session(Arc::new(shared));
    (s.clone(), SessionLabeler { session: s, rx })
}

impl Session {
    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.0.inner.lock().expect("session lock")
    }

    pub fn status(&self) -> StatusBody {
        let g = self.lock();
        StatusBody { state: g.state, iteration: g.iteration }
    }

    /// Unblocks a waiting training loop with an abort.
    pub fn abort(&self) {
        let _ = self.0.tx.lock().expect("sender lock").send(SessionMsg::Abort);
    }

    fn publish(&self, req: LabelRequest) {
        let mut g = self.lock();
        let states = req.snapshot.points.iter().map(|p| p.id).zip(req.states).collect();
        g.iteration = req.snapshot.iteration;
        g.current = Some(Published {
            snapshot: req.snapshot,
            spec: req.spec,
            states,
            published_at: self.0.clock.now(),
            loaded_at: None,
            accepted: false,
        });
        g.state = SessionState::AwaitingLabels;
    }

    fn set_state(&self, state: SessionState, iteration: Option<usize>) {
        let mut g = self.lock();
        g.state = state;
        if let Some(i) = iteration {
            g.iteration = i;
        }
    }
}

impl Labeler for SessionLabeler {
    fn training(&mut self, iteration: usize) {
        self.session.set_state(SessionState::Training, Some(iteration));
    }

    fn request(&mut self, req: LabelRequest) -> prefviz_core::Result<LiveSubmission> {
        self.session.publish(req);
        match self.rx.recv() {
            Ok(SessionMsg::Submission(s)) => Ok(s),
            Ok(SessionMsg::Abort) | Err(_) => Err(Error::Aborted),
        }
    }

    fn done(&mut self) {
        let mut g = self.session.lock();
        g.state = SessionState::Done;
        g.current = None;
    }
}

fn error(status: StatusCode, reason: &str) -> Response {
    (status, Json(json!({ "error": reason }))).into_response()
}

async fn get_status(State(s): State<Session>) -> Json<StatusBody> {
    Json(s.status())
}

async fn get_snapshot(State(s): State<Session>) -> Response {
    let now = s.0.clock.now();
    let mut g = s.lock();
    let awaiting = g.state == SessionState::AwaitingLabels;
    match g.current.as_mut() {
        Some(p) if awaiting => {
            p.loaded_at.get_or_insert(now);
            Json(p.snapshot.clone()).into_response()
        }
        _ => error(StatusCode::CONFLICT, "no_snapshot"),
    }
}

async fn get_thumbnail(State(s): State<Session>, Path(id): Path<StateId>) -> Response {
    let (spec, state) = {
        let g = s.lock();
        let Some(p) = g.current.as_ref().filter(|_| g.state == SessionState::AwaitingLabels) else {
            return error(StatusCode::CONFLICT, "no_snapshot");
        };
        match p.states.get(&id) {
            Some(st) => (p.spec.clone(), st.clone()),
            None => return error(StatusCode::NOT_FOUND, "unknown_id"),
        }
    };
    match render(&spec, &state).to_png() {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string()),
    }
}

async fn post_ranking(State(s): State<Session>, Json(body): Json<RankingBody>) -> Response {
    let now = s.0.clock.now();
    let mut g = s.lock();
    let state = g.state;
    let Some(p) = g.current.as_mut() else {
        return error(StatusCode::CONFLICT, "no_snapshot");
    };
    if p.accepted {
        return error(StatusCode::CONFLICT, "duplicate_submission");
    }
    if state != SessionState::AwaitingLabels {
        return error(StatusCode::CONFLICT, "no_snapshot");
    }
    if let Err(v) = validate_clusters(&body.clusters, Some(&p.snapshot)) {
        return error(StatusCode::UNPROCESSABLE_ENTITY, v.reason());
    }
    let seconds = now - p.loaded_at.unwrap_or(p.published_at);
    let iteration = p.snapshot.iteration;
    let sent = s.0.tx.lock().expect("sender lock").send(SessionMsg::Submission(LiveSubmission {
        clusters: body.clusters,
        seconds,
    }));
    if sent.is_err() {
        return error(StatusCode::GONE, "session_closed");
    }
    p.accepted = true;
    g.state = SessionState::Training;
    log::info!("ranking accepted for iteration {iteration} after {seconds:.1}s");
    Json(json!({ "status": "accepted", "iteration": iteration, "seconds": seconds })).into_response()
}

/// API routes, CORS for any origin, and optionally the UI assets at `/`.
pub fn router(session: Session, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/status", get(get_status))
        .route("/snapshot", get(get_snapshot))
        .route("/state/{id}/thumbnail", get(get_thumbnail))
        .route("/ranking", post(post_ranking))
        .with_state(session);
    let app = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(CorsLayer::permissive())
}

/// Serves `app` on `listener` until `shutdown` resolves.
pub async fn serve<F>(listener: tokio::net::TcpListener, app: Router, shutdown: F) -> std::io::Result<()>
where
    F: std::future::Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
