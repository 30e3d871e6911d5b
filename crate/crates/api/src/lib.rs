//! HTTP surface over the run directories in a workdir: run state, the event
//! stream, pending checkpoint prompts, and decision submission.
//!
//! Every read is served from the files a run maintains, so the API never
//! blocks a coordination loop. Decisions are handed to the run's loop through
//! its inbox and answered by it, exactly as `flowgate decide` does.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/runs` | overview of every run |
//! | GET | `/runs/{id}` | one run |
//! | GET | `/runs/{id}/tasks` | instances with their folded state |
//! | GET | `/runs/{id}/graph` | nodes and edges of the live graph |
//! | GET | `/runs/{id}/events?since=N&wait=S` | events with `seq > N`, long-polling up to `S` seconds |
//! | GET | `/runs/{id}/prompts` | open checkpoint prompts |
//! | GET | `/runs/{id}/prompts/{instance}/artifact` | the checkpoint's `hitl.input` file |
//! | POST | `/runs/{id}/tasks/{instance}/decision` | submit a decision |

pub mod views;

use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::thread;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use flowgate_core::hitl::{self, DecisionError};
use flowgate_core::rundir::{self, RunDir, RunDirError, RunStatus};
use flowgate_core::{Decision, Event, InstanceId};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::oneshot;

/// Shared secret required as `Authorization: Bearer <token>` on POSTs.
pub const TOKEN_ENV: &str = "FLOWGATE_API_TOKEN";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8642";

#[derive(Debug, Clone)]
pub struct ApiConfig {
    pub workdir: PathBuf,
    /// When set, POSTs must carry it as a bearer token.
    pub token: Option<String>,
    /// How long a POST waits for the run's coordinator to answer.
    pub decision_timeout: Duration,
    /// Upper bound on `wait` for the event long-poll.
    pub max_wait: Duration,
}

impl ApiConfig {
    /// Serves `workdir`, taking the token from `FLOWGATE_API_TOKEN`.
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        Self {
            workdir: workdir.into(),
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            decision_timeout: Duration::from_secs(30),
            max_wait: Duration::from_secs(30),
        }
    }
}

/// Error body: `{"code": ..., "message": ..., "detail": ...}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub detail: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_string(),
            message: message.into(),
            detail: Value::Null,
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

impl From<RunDirError> for ApiError {
    fn from(e: RunDirError) -> Self {
        match e {
            RunDirError::UnknownRun(_) => ApiError::not_found(e.to_string()),
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl From<io::Error> for ApiError {
    fn from(e: io::Error) -> Self {
        ApiError::internal(e.to_string())
    }
}

/// HTTP status for each decision error.
pub fn decision_status(e: &DecisionError) -> StatusCode {
    match e {
        DecisionError::UnknownInstance(_) => StatusCode::NOT_FOUND,
        DecisionError::NotAwaiting { .. } | DecisionError::DuplicateDecision(_) => StatusCode::CONFLICT,
        DecisionError::NotPermitted { .. }
        | DecisionError::UnknownOverrideTarget(_)
        | DecisionError::InvalidSkip(..) => StatusCode::UNPROCESSABLE_ENTITY,
        DecisionError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
    }
}

impl From<DecisionError> for ApiError {
    fn from(e: DecisionError) -> Self {
        let detail = serde_json::to_value(&e)
            .ok()
            .and_then(|v| v.get("detail").cloned())
            .unwrap_or(Value::Null);
        ApiError {
            status: decision_status(&e),
            code: e.code().to_string(),
            message: e.to_string(),
            detail,
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs filesystem work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

pub fn router(config: ApiConfig) -> Router {
    Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/tasks", get(get_tasks))
        .route("/runs/{id}/graph", get(get_graph))
        .route("/runs/{id}/events", get(get_events))
        .route("/runs/{id}/prompts", get(get_prompts))
        .route("/runs/{id}/prompts/{instance}/artifact", get(get_artifact))
        .route("/runs/{id}/tasks/{instance}/decision", post(post_decision))
        .with_state(config)
}

/// Serves until the listener fails or `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    config: ApiConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    axum::serve(listener, router(config)).with_graceful_shutdown(shutdown).await
}

/// A server running on its own thread and runtime.
pub struct Server {
    pub addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<io::Result<()>>>,
}

impl Server {
    /// Binds `addr` (port 0 picks a free port) and serves in the background.
    pub fn spawn(addr: SocketAddr, config: ApiConfig) -> io::Result<Server> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = oneshot::channel::<()>();
        let thread = thread::Builder::new().name("flowgate-api".into()).spawn(move || {
            runtime.block_on(serve(listener, config, async {
                let _ = stopped.await;
            }))
        })?;
        info!("status API listening on http://{addr}");
        Ok(Server {
            addr,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting requests and waits for in-flight ones.
    pub fn stop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(thread) = self.thread.take() {
            match thread.join() {
                Ok(Err(e)) => warn!("status API stopped with an error: {e}"),
                Err(_) => warn!("status API thread panicked"),
                Ok(Ok(())) => {}
            }
        }
    }

    /// Serves until the process ends.
    pub fn wait(mut self) -> io::Result<()> {
        match self.thread.take().map(thread::JoinHandle::join) {
            Some(Ok(result)) => result,
            Some(Err(_)) => Err(io::Error::other("status API thread panicked")),
            None => Ok(()),
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop();
    }
}

fn open_run(config: &ApiConfig, id: &str) -> ApiResult<RunDir> {
    Ok(RunDir::open(&config.workdir, id)?)
}

async fn list_runs(State(config): State<ApiConfig>) -> ApiResult<Json<Vec<rundir::RunOverview>>> {
    blocking(move || {
        let mut out = Vec::new();
        for run in rundir::list_runs(&config.workdir)? {
            out.push(run.overview()?);
        }
        Ok(Json(out))
    })
    .await
}

async fn get_run(State(config): State<ApiConfig>, Path(id): Path<String>) -> ApiResult<Json<views::RunDetail>> {
    blocking(move || Ok(Json(views::run_detail(&open_run(&config, &id)?)?))).await
}

async fn get_tasks(State(config): State<ApiConfig>, Path(id): Path<String>) -> ApiResult<Json<Vec<views::TaskView>>> {
    blocking(move || Ok(Json(views::task_list(&open_run(&config, &id)?)?))).await
}

async fn get_graph(
    State(config): State<ApiConfig>,
    Path(id): Path<String>,
) -> ApiResult<Json<flowgate_core::graph::GraphView>> {
    blocking(move || Ok(Json(open_run(&config, &id)?.graph()?))).await
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    since: Option<String>,
    wait: Option<String>,
}

async fn get_events(
    State(config): State<ApiConfig>,
    Path(id): Path<String>,
    Query(query): Query<EventsQuery>,
) -> ApiResult<Json<Vec<Event>>> {
    let since = match query.since.as_deref() {
        None | Some("") => 0,
        Some(s) => s
            .parse::<u64>()
            .map_err(|_| ApiError::bad_request(format!("since must be a non-negative integer, got `{s}`")))?,
    };
    let wait = match query.wait.as_deref() {
        None | Some("") => Duration::ZERO,
        Some(s) => s
            .parse::<f64>()
            .ok()
            .filter(|w| w.is_finite() && *w >= 0.0)
            .map(Duration::from_secs_f64)
            .ok_or_else(|| ApiError::bad_request(format!("wait must be a number of seconds, got `{s}`")))?,
    }
    .min(config.max_wait);

    let run = {
        let config = config.clone();
        blocking(move || open_run(&config, &id)).await?
    };
    let deadline = tokio::time::Instant::now() + wait;
    loop {
        let (events, finished) = {
            let run = run.clone();
            blocking(move || {
                let events: Vec<Event> = run.events()?.into_iter().filter(|e| e.seq > since).collect();
                Ok((events, run.status() == RunStatus::Finished))
            })
            .await?
        };
        if !events.is_empty() || finished || tokio::time::Instant::now() >= deadline {
            return Ok(Json(events));
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

async fn get_prompts(
    State(config): State<ApiConfig>,
    Path(id): Path<String>,
) -> ApiResult<Json<Vec<hitl::PendingPrompt>>> {
    blocking(move || Ok(Json(hitl::list_prompts(&open_run(&config, &id)?.path)?))).await
}

fn parse_instance(text: &str) -> ApiResult<InstanceId> {
    text.parse()
        .map_err(|_| ApiError::from(DecisionError::UnknownInstance(text.to_string())))
}

fn content_type(path: &FsPath) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("txt" | "log" | "md" | "out") => "text/plain; charset=utf-8",
        Some("json") => "application/json",
        Some("csv") => "text/csv",
        Some("toml") => "application/toml",
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("svg") => "image/svg+xml",
        Some("html") => "text/html; charset=utf-8",
        _ => "application/octet-stream",
    }
}

async fn get_artifact(
    State(config): State<ApiConfig>,
    Path((id, instance)): Path<(String, String)>,
) -> ApiResult<Response> {
    blocking(move || {
        let run = open_run(&config, &id)?;
        let instance = parse_instance(&instance)?;
        let Some(prompt) = hitl::read_prompt(&run.path, &instance)? else {
            if rundir::decision_recorded(&run, &instance) {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "AlreadyDecided",
                    format!("the checkpoint {instance} has already been decided"),
                ));
            }
            return Err(ApiError::not_found(format!("no open prompt for {instance}")));
        };
        let path = hitl::artifact_path(&run.path, &prompt)
            .ok_or_else(|| ApiError::not_found(format!("{instance} declares no hitl.input artifact")))?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(ApiError::not_found(format!("artifact {} does not exist", path.display())))
            }
            Err(e) => return Err(e.into()),
        };
        Ok((
            [
                (header::CONTENT_TYPE, content_type(&path).to_string()),
                (header::CONTENT_LENGTH, bytes.len().to_string()),
            ],
            bytes,
        )
            .into_response())
    })
    .await
}

fn authorize(config: &ApiConfig, headers: &HeaderMap) -> ApiResult<()> {
    let Some(token) = &config.token else {
        return Ok(());
    };
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(token.as_str()) {
        Ok(())
    } else {
        Err(ApiError::new(
            StatusCode::UNAUTHORIZED,
            "Unauthorized",
            format!("a bearer token matching {TOKEN_ENV} is required"),
        ))
    }
}

/// Body of a successful decision POST.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionResponse {
    pub decision: Decision,
    pub outcome: hitl::DecisionOutcome,
}

/// Builds the decision from a request body, taking the instance from the path.
pub fn decision_from_body(instance: &InstanceId, mut body: Value) -> Result<Decision, String> {
    let Some(obj) = body.as_object_mut() else {
        return Err("decision body must be a JSON object".into());
    };
    match obj.get("instance") {
        None | Some(Value::Null) => {
            obj.insert("instance".into(), Value::String(instance.to_string()));
        }
        Some(Value::String(s)) if s == &instance.to_string() => {}
        Some(other) => return Err(format!("body names instance {other}, path names {instance}")),
    }
    serde_json::from_value(body).map_err(|e| format!("invalid decision: {e}"))
}

async fn post_decision(
    State(config): State<ApiConfig>,
    Path((id, instance)): Path<(String, String)>,
    headers: HeaderMap,
    body: Result<Json<Value>, JsonRejection>,
) -> ApiResult<Json<DecisionResponse>> {
    authorize(&config, &headers)?;
    let Json(body) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    blocking(move || {
        let run = open_run(&config, &id)?;
        let instance = parse_instance(&instance)?;
        let decision = decision_from_body(&instance, body).map_err(ApiError::bad_request)?;
        let outcome = rundir::decide(&run, &decision, config.decision_timeout)?;
        info!("run {id}: {} via API", decision.summary());
        Ok(Json(DecisionResponse { decision, outcome }))
    })
    .await
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowgate_core::hitl::Verdict;

    fn id(s: &str) -> InstanceId {
        s.parse().unwrap()
    }

    #[test]
    fn body_instance_defaults_to_the_path() {
        let d = decision_from_body(&id("c#1"), serde_json::json!({"verdict": "approve"})).unwrap();
        assert_eq!(d.instance, id("c#1"));
        assert_eq!(d.verdict, Verdict::Approve);
    }

    #[test]
    fn conflicting_instance_is_rejected() {
        let err = decision_from_body(&id("c#1"), serde_json::json!({"instance": "c#2", "verdict": "approve"}))
            .unwrap_err();
        assert!(err.contains("c#2"), "{err}");
        assert!(decision_from_body(&id("c#1"), serde_json::json!({"verdict": "maybe"})).is_err());
        assert!(decision_from_body(&id("c#1"), serde_json::json!([1])).is_err());
    }

    #[test]
    fn decision_errors_map_to_statuses() {
        let cases = [
            (DecisionError::UnknownInstance("x".into()), 404),
            (
                DecisionError::NotAwaiting {
                    instance: "x".into(),
                    state: "Running".into(),
                },
                409,
            ),
            (DecisionError::DuplicateDecision("x".into()), 409),
            (
                DecisionError::NotPermitted {
                    checkpoint: "c".into(),
                    names: vec!["y".into()],
                },
                422,
            ),
            (DecisionError::UnknownOverrideTarget("y.k".into()), 422),
            (DecisionError::Unavailable("down".into()), 503),
        ];
        for (err, status) in cases {
            let api: ApiError = err.clone().into();
            assert_eq!(api.status.as_u16(), status, "{err}");
            assert_eq!(api.code, err.code());
        }
    }

    #[test]
    fn artifact_types_follow_extensions() {
        assert_eq!(content_type(FsPath::new("m/metrics.txt")), "text/plain; charset=utf-8");
        assert_eq!(content_type(FsPath::new("r.JSON")), "application/json");
        assert_eq!(content_type(FsPath::new("blob")), "application/octet-stream");
    }
}
