//! Loopback JSON API under `/v1`.
//!
//! Planning is synchronous. Runs are started with `POST /v1/runs`, which
//! checks the approval gate and takes the workspace lock before answering
//! with a run id, and polled with `GET /v1/runs/{id}`.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query as UrlQuery, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use provwf_core::executor::{MockRunner, RunReport, SubprocessRunner, TaskRunner};
use provwf_core::goal::KeywordInterpreter;
use provwf_core::planner::{Configuration, PlanError};
use provwf_core::provenance::provenance_of;
use provwf_core::query::{
    render_text, translate_natural, ContractBackend, FilenameBackend, QueryAdapter, QueryBackend, QueryError, TranslateError,
};
use provwf_core::session::{DialogContext, PlanningSession};
use provwf_core::workspace::{Workspace, WorkspaceError};
use provwf_core::{ArtifactId, Selector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;

pub const DEFAULT_PORT: u16 = 7464;

#[derive(Debug, thiserror::Error)]
pub enum BindError {
    #[error("invalid bind address {0:?}")]
    Invalid(String),
    #[error("refusing to listen on non-loopback address {0}; pass --allow-remote to override")]
    NotLoopback(IpAddr),
    #[error("cannot listen on {addr}: {source}")]
    Io { addr: SocketAddr, source: io::Error },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServeOptions {
    pub bind: String,
    pub port: u16,
    pub allow_remote: bool,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions { bind: "loopback".into(), port: DEFAULT_PORT, allow_remote: false }
    }
}

/// `loopback` and `localhost` mean 127.0.0.1.
pub fn resolve_bind(opts: &ServeOptions) -> Result<SocketAddr, BindError> {
    let ip = match opts.bind.to_ascii_lowercase().as_str() {
        "loopback" | "localhost" => IpAddr::V4(Ipv4Addr::LOCALHOST),
        other => other.trim_matches(['[', ']']).parse().map_err(|_| BindError::Invalid(opts.bind.clone()))?,
    };
    if !ip.is_loopback() && !opts.allow_remote {
        return Err(BindError::NotLoopback(ip));
    }
    Ok(SocketAddr::new(ip, opts.port))
}

pub async fn listen(opts: &ServeOptions) -> Result<TcpListener, BindError> {
    let addr = resolve_bind(opts)?;
    TcpListener::bind(addr).await.map_err(|source| BindError::Io { addr, source })
}

/// Machine-readable error body: `{"error": {"code", "message", "pointer"}}`.
/// Codes are stable; messages are for people.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    /// JSON pointer (or `?param`) to the offending input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pointer: Option<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), pointer: None }
    }

    pub fn at(mut self, pointer: impl Into<String>) -> Self {
        self.pointer = Some(pointer.into());
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", r.body_text()).at("")
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", r.body_text())
    }
}

impl From<WorkspaceError> for ApiError {
    fn from(e: WorkspaceError) -> Self {
        let (status, code) = match &e {
            WorkspaceError::NoPlan(_) => (StatusCode::NOT_FOUND, "plan_not_found"),
            WorkspaceError::AmbiguousPlan(_) => (StatusCode::BAD_REQUEST, "ambiguous_plan"),
            WorkspaceError::NotApproved(_) => (StatusCode::CONFLICT, "not_approved"),
            WorkspaceError::Locked(_) => (StatusCode::CONFLICT, "run_in_progress"),
            WorkspaceError::NoDataset => (StatusCode::CONFLICT, "no_dataset"),
            WorkspaceError::Plan(p) => return plan_error(p),
            WorkspaceError::Catalog(_) => (StatusCode::INTERNAL_SERVER_ERROR, "catalog_invalid"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

fn plan_error(e: &PlanError) -> ApiError {
    let (status, code) = match e {
        PlanError::OpenClarifications(_) => (StatusCode::CONFLICT, "open_clarifications"),
        PlanError::Sealed => (StatusCode::CONFLICT, "plan_sealed"),
        PlanError::Corrupt(_) => (StatusCode::INTERNAL_SERVER_ERROR, "plan_corrupt"),
        _ => (StatusCode::UNPROCESSABLE_ENTITY, "plan_failed"),
    };
    ApiError::new(status, code, e.to_string())
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        match &e {
            QueryError::Parse(p) => ApiError::new(StatusCode::BAD_REQUEST, "query_parse", e.to_string()).at(format!("/query@{}", p.offset)),
            QueryError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "artifact_not_found", e.to_string()),
            QueryError::Unavailable(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "unavailable", e.to_string()),
        }
    }
}

impl From<TranslateError> for ApiError {
    fn from(e: TranslateError) -> Self {
        match &e {
            TranslateError::AdapterUnavailable(_) => {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "adapter_unavailable", e.to_string()).at("/question")
            }
            TranslateError::TranslationFailed { .. } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "translation_failed", e.to_string()).at("/question")
            }
        }
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Succeeded,
    Failed,
    Error,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunStatus {
    pub run_id: String,
    pub plan_id: String,
    pub state: RunState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<RunReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

type Shared<T> = Arc<Mutex<T>>;

/// Everything the handlers share. Sessions live in memory only.
pub struct AppState {
    workspace: Workspace,
    adapter: Option<Arc<dyn QueryAdapter>>,
    sessions: Mutex<HashMap<String, Shared<PlanningSession>>>,
    next_session: AtomicU64,
    runs: Mutex<HashMap<String, RunStatus>>,
}

impl AppState {
    pub fn new(workspace: Workspace) -> Self {
        AppState {
            workspace,
            adapter: None,
            sessions: Mutex::new(HashMap::new()),
            next_session: AtomicU64::new(1),
            runs: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_adapter(mut self, adapter: Arc<dyn QueryAdapter>) -> Self {
        self.adapter = Some(adapter);
        self
    }

    pub fn workspace(&self) -> &Workspace {
        &self.workspace
    }

    fn session(&self, id: &str) -> Result<Shared<PlanningSession>, ApiError> {
        self.sessions
            .lock()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session {id}")))
    }

    /// Drafts are written so that plan ids resolve, but a draft never
    /// replaces an approved plan file.
    fn persist(&self, config: &Configuration) -> Result<(), ApiError> {
        if !config.is_approved() {
            if let Ok(existing) = self.workspace.load_plan(config.plan_id()) {
                if existing.is_approved() && existing.plan_id() == config.plan_id() {
                    return Ok(());
                }
            }
        }
        self.workspace.save_plan(config)?;
        Ok(())
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(internal)?
}

pub fn router(state: Arc<AppState>) -> Router {
    let v1 = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/message", post(post_message))
        .route("/sessions/{id}/approve", post(approve_session))
        .route("/runs", post(start_run))
        .route("/runs/{id}", get(get_run))
        .route("/dag/{plan_id}", get(get_dag))
        .route("/artifacts", get(list_artifacts))
        .route("/artifacts/{id}/provenance", get(get_provenance))
        .route("/query", post(post_query));
    Router::new().nest("/v1", v1).fallback(not_found).method_not_allowed_fallback(method_not_allowed).with_state(state)
}

async fn not_found(uri: Uri) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no endpoint at {}", uri.path())).at(uri.path().to_owned())
}

async fn method_not_allowed(uri: Uri) -> ApiError {
    ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", format!("method not allowed on {}", uri.path()))
}

async fn create_session(State(st): State<Arc<AppState>>) -> (StatusCode, Json<Value>) {
    let id = format!("s{}", st.next_session.fetch_add(1, Ordering::Relaxed));
    st.sessions.lock().insert(id.clone(), Arc::new(Mutex::new(PlanningSession::new(id.clone()))));
    (StatusCode::CREATED, Json(json!({ "session_id": id })))
}

fn session_view(s: &PlanningSession) -> Value {
    json!({
        "session_id": s.id,
        "transcript": s.transcript(),
        "pl": s.pl(),
        "plan_id": s.configuration().map(|c| c.plan_id().to_owned()),
        "plan_status": s.configuration().map(|c| c.status()),
        "needs_confirmation": s.open_clarifications(),
    })
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let s = st.session(&id)?;
    let view = session_view(&s.lock());
    Ok(Json(view))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MessageBody {
    text: String,
}

async fn post_message(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<MessageBody>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(body) = body?;
    let session = st.session(&id)?;
    blocking(move || {
        let catalog = st.workspace.catalog()?;
        let interpreter = KeywordInterpreter;
        let ctx = DialogContext {
            registry: st.workspace.registry().snapshot(),
            catalog: &catalog,
            interpreter: &interpreter,
            adapter: st.adapter.as_deref(),
        };
        let mut s = session.lock();
        let reply = s.advance_dialog(&body.text, &ctx);
        if let Some(config) = s.configuration() {
            st.persist(config)?;
        }
        let mut view = session_view(&s);
        view["reply"] = serde_json::to_value(&reply).map_err(internal)?;
        Ok(Json(view))
    })
    .await
}

async fn approve_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let session = st.session(&id)?;
    blocking(move || {
        let mut s = session.lock();
        if s.configuration().is_none() {
            return Err(ApiError::new(StatusCode::CONFLICT, "no_plan", "this session has no plan to approve yet"));
        }
        let sealed = s.approve().map_err(|e| plan_error(&e))?.clone();
        st.persist(&sealed)?;
        Ok(Json(json!({
            "session_id": s.id,
            "plan_id": sealed.plan_id(),
            "status": sealed.status(),
            "fingerprint": sealed.fingerprint(),
        })))
    })
    .await
}

#[derive(Deserialize)]
#[serde(rename_all = "lowercase")]
enum RunnerKind {
    Mock,
    Subprocess,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunBody {
    plan_id: String,
    #[serde(default)]
    workers: Option<usize>,
    #[serde(default)]
    runner: Option<RunnerKind>,
}

async fn start_run(State(st): State<Arc<AppState>>, body: Result<Json<RunBody>, JsonRejection>) -> Result<impl IntoResponse, ApiError> {
    let Json(body) = body?;
    let workers = body.workers.unwrap_or(1);
    if !(1..=256).contains(&workers) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "workers must be between 1 and 256").at("/workers"));
    }
    let runner: Box<dyn TaskRunner> = match body.runner.unwrap_or(RunnerKind::Subprocess) {
        RunnerKind::Mock => Box::new(MockRunner::new()),
        RunnerKind::Subprocess => Box::new(SubprocessRunner),
    };
    let prepared = {
        let st = st.clone();
        let plan_id = body.plan_id.clone();
        blocking(move || st.workspace.prepare_run(&plan_id).map_err(|e| ApiError::from(e).at("/plan_id"))).await?
    };
    let run_id = prepared.run_id().to_owned();
    let status =
        RunStatus { run_id: run_id.clone(), plan_id: prepared.plan_id().to_owned(), state: RunState::Running, report: None, error: None };
    st.runs.lock().insert(run_id.clone(), status.clone());
    let worker_state = st.clone();
    tokio::task::spawn_blocking(move || {
        let outcome = worker_state.workspace.execute_prepared(prepared, runner.as_ref(), workers);
        let mut runs = worker_state.runs.lock();
        if let Some(entry) = runs.get_mut(&run_id) {
            match outcome {
                Ok(report) => {
                    entry.state = if report.failed == 0 { RunState::Succeeded } else { RunState::Failed };
                    entry.report = Some(report);
                }
                Err(e) => {
                    log::error!("run {run_id}: {e}");
                    entry.state = RunState::Error;
                    entry.error = Some(e.to_string());
                }
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(status)))
}

async fn get_run(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<RunStatus>, ApiError> {
    if let Some(s) = st.runs.lock().get(&id) {
        return Ok(Json(s.clone()));
    }
    let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_hexdigit() || c == '-');
    let report = valid.then(|| st.workspace.load_run(&id).ok()).flatten();
    match report {
        Some(r) => Ok(Json(RunStatus {
            run_id: id,
            plan_id: r.plan_id.clone(),
            state: if r.failed == 0 { RunState::Succeeded } else { RunState::Failed },
            report: Some(r),
            error: None,
        })),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "run_not_found", format!("no run {id}"))),
    }
}

async fn get_dag(State(st): State<Arc<AppState>>, Path(plan_id): Path<String>) -> Result<Response, ApiError> {
    blocking(move || {
        let config = st.workspace.load_plan(&plan_id)?;
        let catalog = st.workspace.catalog()?;
        let dag = st.workspace.dag(&config, &catalog)?;
        Ok(([(header::CONTENT_TYPE, "application/json")], dag.canonical_bytes()).into_response())
    })
    .await
}

async fn list_artifacts(
    State(st): State<Arc<AppState>>,
    params: Result<UrlQuery<BTreeMap<String, String>>, QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    let UrlQuery(params) = params?;
    let mut sel = Selector::all();
    let mut include_superseded = false;
    for (k, v) in params {
        match k.as_str() {
            "type" => sel.artifact_type = Some(v),
            "subject" => sel.subject = Some(v),
            "session" => sel.session = Some(v),
            "name" => sel.logical_name = Some(v),
            "all" => include_superseded = matches!(v.as_str(), "1" | "true" | "yes"),
            _ => {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "bad_selector",
                    format!("unknown selector {k:?}; use type, subject, session, name or all"),
                )
                .at(format!("?{k}")))
            }
        }
    }
    let snap = st.workspace.registry().snapshot();
    let found = if include_superseded { snap.lookup(&sel) } else { snap.lookup_live(&sel) };
    let mut records = Vec::with_capacity(found.len());
    for a in &found {
        let mut r = a.to_record().map_err(internal)?;
        r["live"] = json!(snap.is_live(&a.id));
        records.push(r);
    }
    Ok(Json(json!({ "count": records.len(), "artifacts": records })))
}

async fn get_provenance(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let aid = ArtifactId::parse(&id)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "bad_artifact_id", format!("{id:?} is not an artifact id")).at("/id"))?;
    let snap = st.workspace.registry().snapshot();
    let chain = provenance_of(&aid, &snap).map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "artifact_not_found", e.to_string()))?;
    Ok(Json(json!({ "rule_sequence": chain.rule_sequence(), "chain": chain })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryBody {
    #[serde(default)]
    query: Option<String>,
    /// Natural-language question, translated to the DSL by the adapter.
    #[serde(default)]
    question: Option<String>,
    #[serde(default)]
    backend: Option<String>,
}

async fn post_query(State(st): State<Arc<AppState>>, body: Result<Json<QueryBody>, JsonRejection>) -> Result<Json<Value>, ApiError> {
    let Json(body) = body?;
    blocking(move || {
        let q = match (&body.query, &body.question) {
            (Some(text), None) => provwf_core::query::parse(text).map_err(|e| ApiError::from(QueryError::from(e)))?,
            (None, Some(question)) => match &st.adapter {
                Some(a) => translate_natural(question, a.as_ref())?,
                None => return Err(TranslateError::AdapterUnavailable("no adapter endpoint configured".into()).into()),
            },
            _ => return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "send exactly one of \"query\" or \"question\"").at("")),
        };
        let snap = st.workspace.registry().snapshot();
        let result = match body.backend.as_deref().unwrap_or("contract") {
            "contract" => ContractBackend::new(snap.clone()).evaluate(&q)?,
            "filename" => FilenameBackend::new(snap.clone()).evaluate(&q)?,
            other => return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", format!("unknown backend {other:?}")).at("/backend")),
        };
        let text = render_text(&result, &snap);
        Ok(Json(json!({ "result": result, "text": text })))
    })
    .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_bind_is_loopback() {
        let addr = resolve_bind(&ServeOptions::default()).unwrap();
        assert!(addr.ip().is_loopback());
        assert_eq!(addr.port(), DEFAULT_PORT);
    }

    #[test]
    fn remote_bind_needs_override() {
        let wild = ServeOptions { bind: "0.0.0.0".into(), ..ServeOptions::default() };
        assert!(matches!(resolve_bind(&wild), Err(BindError::NotLoopback(_))));
        assert!(resolve_bind(&ServeOptions { allow_remote: true, ..wild }).is_ok());
        let v6 = ServeOptions { bind: "[::1]".into(), ..ServeOptions::default() };
        assert!(resolve_bind(&v6).unwrap().ip().is_loopback());
        assert!(matches!(resolve_bind(&ServeOptions { bind: "nowhere".into(), ..ServeOptions::default() }), Err(BindError::Invalid(_))));
    }

    #[test]
    fn error_body_shape() {
        let e = ApiError::new(StatusCode::CONFLICT, "not_approved", "plan p is a draft").at("/plan_id");
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v, json!({"code": "not_approved", "message": "plan p is a draft", "pointer": "/plan_id"}));
    }
}
