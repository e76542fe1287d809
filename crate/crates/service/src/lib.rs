//! HTTP front end for EMS sessions.
//!
//! Sessions live in memory. Steps on one session are serialized behind its
//! lock and run on the blocking pool; different sessions step in parallel.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ems_core::error::{CaseError, EmsError};
use ems_core::session::{ArmRequest, CalibrateRequest, Session, SessionSpec, StageStatus, StepRequest};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{Mutex, RwLock};
use tower_http::services::ServeDir;

pub const DEFAULT_PORT: u16 = 8080;

/// Service settings. Keys match the long command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct ServiceConfig {
    pub port: u16,
    pub bind: String,
    pub ui_dir: PathBuf,
    /// Worker threads for contingency screening inside each session.
    pub jobs: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { port: DEFAULT_PORT, bind: "127.0.0.1".into(), ui_dir: PathBuf::from("ui"), jobs: 1 }
    }
}

/// Command-line flags; anything left unset falls back to the config file,
/// then to the defaults.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct ServeArgs {
    /// TOML file with the same keys as these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "EMS_PORT")]
    pub port: Option<u16>,
    #[arg(long)]
    pub bind: Option<String>,
    /// Directory served under /ui.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl ServeArgs {
    pub fn resolve(&self) -> Result<ServiceConfig, String> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => ServiceConfig::default(),
        };
        if let Some(v) = self.port {
            cfg.port = v;
        }
        if let Some(v) = &self.bind {
            cfg.bind = v.clone();
        }
        if let Some(v) = &self.ui_dir {
            cfg.ui_dir = v.clone();
        }
        if let Some(v) = self.jobs {
            cfg.jobs = v.max(1);
        }
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> Result<ServiceConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

#[derive(Default)]
pub struct AppState {
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    jobs: usize,
}

impl AppState {
    pub fn new(jobs: usize) -> Arc<Self> {
        Arc::new(AppState { jobs: jobs.max(1), ..Default::default() })
    }

    async fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session `{id}`")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, kind, message: message.into() }
    }
}

impl From<EmsError> for ApiError {
    fn from(e: EmsError) -> Self {
        let (status, kind) = match &e {
            EmsError::Case(CaseError::Syntax { .. }) => (StatusCode::BAD_REQUEST, "case_syntax"),
            EmsError::Case(_) => (StatusCode::UNPROCESSABLE_ENTITY, "case_invalid"),
            EmsError::Input(_) | EmsError::Json(_) => (StatusCode::BAD_REQUEST, "bad_input"),
            EmsError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            EmsError::Attack(_) => (StatusCode::UNPROCESSABLE_ENTITY, "attack"),
            EmsError::Detector(_) => (StatusCode::UNPROCESSABLE_ENTITY, "detector"),
            EmsError::Topology(_) => (StatusCode::UNPROCESSABLE_ENTITY, "topology"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "engine"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": { "kind": self.kind, "message": self.message } }))).into_response()
    }
}

/// Parses a JSON body, reporting the line and column of syntax errors. An
/// empty body reads as `{}`.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let text = if body.iter().all(u8::is_ascii_whitespace) { &b"{}"[..] } else { &body[..] };
    serde_json::from_slice(text).map_err(|e| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_json",
            format!("request body, line {} column {}: {e}", e.line(), e.column()),
        )
    })
}

/// Every response names the session, its last completed tick and that
/// tick's stage statuses.
#[derive(Serialize)]
struct Envelope<T: Serialize> {
    session: String,
    tick: Option<u64>,
    next_tick: u64,
    stages: Vec<StageStatus>,
    data: T,
}

fn envelope<T: Serialize>(s: &Session, data: T) -> Envelope<T> {
    let last = s.next_tick().checked_sub(1).and_then(|t| s.record(t));
    Envelope {
        session: s.id.clone(),
        tick: last.as_ref().map(|r| r.tick),
        next_tick: s.next_tick(),
        stages: last.map(|r| r.run.stages.clone()).unwrap_or_default(),
        data,
    }
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let mut spec: SessionSpec = parse_body(&body)?;
    spec.config.rtca.jobs = spec.config.rtca.jobs.max(app.jobs);
    let mut session = tokio::task::spawn_blocking(move || Session::new("pending", &spec))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "engine", e.to_string()))??;
    // Ids are handed out only to sessions that were actually created.
    let mut sessions = app.sessions.write().await;
    let id = format!("s{}", app.next_id.fetch_add(1, Ordering::Relaxed) + 1);
    session.id = id.clone();
    let out = Json(envelope(&session, session.info()));
    sessions.insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, out).into_response())
}

async fn list_sessions(State(app): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "sessions": app.sessions.read().await.keys().collect::<Vec<_>>() }))
}

async fn get_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let s = app.get(&id).await?;
    let s = s.lock().await;
    Ok(Json(envelope(&s, s.info())).into_response())
}

async fn delete_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<StatusCode, ApiError> {
    match app.sessions.write().await.remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session `{id}`"))),
    }
}

/// Runs `f` on the session from the blocking pool while holding its lock.
async fn with_session<R, F>(app: &AppState, id: &str, f: F) -> Result<R, ApiError>
where
    F: FnOnce(&mut Session) -> Result<R, ApiError> + Send + 'static,
    R: Send + 'static,
{
    let s = app.get(id).await?;
    let mut guard = s.lock_owned().await;
    tokio::task::spawn_blocking(move || f(&mut guard))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "engine", e.to_string()))?
}

async fn step(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Response, ApiError> {
    let req: StepRequest = parse_body(&body)?;
    let out = with_session(&app, &id, move |s| {
        let run = s.step(&req)?;
        Ok(serde_json::to_value(envelope(s, run)).expect("responses serialize"))
    })
    .await?;
    Ok(Json(out).into_response())
}

async fn arm(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Response, ApiError> {
    let req: ArmRequest = parse_body(&body)?;
    let out = with_session(&app, &id, move |s| {
        let armed = s.arm(req)?.clone();
        Ok(serde_json::to_value(envelope(s, armed)).expect("responses serialize"))
    })
    .await?;
    Ok(Json(out).into_response())
}

async fn disarm(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let s = app.get(&id).await?;
    let mut s = s.lock().await;
    let was = s.disarm();
    Ok(Json(envelope(&s, json!({ "disarmed": was }))).into_response())
}

async fn calibrate(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Response, ApiError> {
    let req: CalibrateRequest = parse_body(&body)?;
    let out = with_session(&app, &id, move |s| {
        let g = s.calibrate(&req)?.clone();
        Ok(serde_json::to_value(envelope(s, g)).expect("responses serialize"))
    })
    .await?;
    Ok(Json(out).into_response())
}

/// The stored artifact, byte for byte as the command line writes it. Tick
/// and stage status ride in headers.
async fn report(
    State(app): State<Arc<AppState>>,
    UrlPath((id, stage, tick)): UrlPath<(String, String, u64)>,
) -> Result<Response, ApiError> {
    let s = app.get(&id).await?;
    let s = s.lock().await;
    let artifact = s.report(&stage, tick)?;
    let body = ems_core::session::report_text(artifact);
    let status = match s.record(tick).and_then(|r| r.run.status(&stage)) {
        Some(st) => serde_json::to_value(st).expect("states serialize").as_str().unwrap_or("ok").to_string(),
        None => "ok".to_string(),
    };
    let mut resp = (StatusCode::OK, body).into_response();
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    h.insert("x-ems-tick", HeaderValue::from(tick));
    h.insert("x-ems-stage-status", HeaderValue::from_str(&status).expect("ascii"));
    Ok(resp)
}

async fn graph(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let s = app.get(&id).await?;
    let s = s.lock().await;
    Ok(Json(envelope(&s, s.graph())).into_response())
}

async fn event_log(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let s = app.get(&id).await?;
    let text = s.lock().await.log().to_jsonl();
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

pub fn router(app: Arc<AppState>, ui_dir: &Path) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/:id", get(get_session).delete(delete_session))
        .route("/sessions/:id/step", post(step))
        .route("/sessions/:id/attack", post(arm).delete(disarm))
        .route("/sessions/:id/reports/:stage/:tick", get(report))
        .route("/sessions/:id/graph", get(graph))
        .route("/sessions/:id/log", get(event_log))
        .route("/sessions/:id/detector/calibrate", post(calibrate))
        .nest_service("/ui", ServeDir::new(ui_dir).append_index_html_on_directories(true))
        .with_state(app)
}

pub async fn serve(cfg: ServiceConfig) -> std::io::Result<()> {
    let addr: SocketAddr = format!("{}:{}", cfg.bind, cfg.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bind address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("ems-service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(cfg.jobs), &cfg.ui_dir)).await
}
