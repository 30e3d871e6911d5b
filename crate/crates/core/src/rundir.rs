//! On-disk layout of a run, shared by the orchestrator, the CLI and the HTTP API.
//!
//! ```text
//! <workdir>/run-<id>/
//!   spec.toml  events.log  state.json  graph.json  run.json  result.json
//!   prompts/<name>#<k>.json
//!   tasks/<name>#<k>/{stdout.log, stderr.log, pid, handle}
//!   decisions/<name>#<k>/hitl_decision.json
//!   decisions/inbox/<request>.request.json, <request>.outcome.json
//!   status/<site>/<name>#<k>.{exit,done}
//! ```
//!
//! Other processes hand decisions to a live run through the inbox: they drop
//! a request file, the run's coordination loop validates and applies it, and
//! answers with an outcome file.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec_local::process_alive;
use crate::fsutil::write_json_atomic;
use crate::graph::GraphView;
use crate::config::load_spec;
use crate::hitl::{read_decision, Decision, DecisionError, DecisionOutcome, DECISIONS_DIR};
use crate::ids::InstanceId;
use crate::registry::{fold_events, read_events, Event, RegistryError, StateMap, TaskState, EVENTS_FILE};

pub const SPEC_FILE: &str = "spec.toml";
pub const GRAPH_FILE: &str = "graph.json";
pub const RUN_FILE: &str = "run.json";
pub const RESULT_FILE: &str = "result.json";
pub const INBOX_DIR: &str = "inbox";
pub const HANDLE_FILE: &str = "handle";

/// Environment variable naming the default directory that holds runs.
pub const WORKDIR_ENV: &str = "FLOWGATE_WORKDIR";
pub const DEFAULT_WORKDIR: &str = "flowgate-runs";

/// `$FLOWGATE_WORKDIR`, else `./flowgate-runs`.
pub fn default_workdir() -> PathBuf {
    std::env::var_os(WORKDIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_WORKDIR))
}

pub fn run_dir(workdir: &Path, run_id: &str) -> PathBuf {
    workdir.join(format!("run-{run_id}"))
}

/// Sortable, collision-resistant run id such as `20261019-141502-3fa9`.
pub fn new_run_id() -> String {
    format!(
        "{}-{:04x}",
        Utc::now().format("%Y%m%d-%H%M%S"),
        rand::thread_rng().gen::<u16>()
    )
}

pub fn valid_run_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.') && id != "." && id != ".."
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub id: String,
    /// Coordinator process currently driving the run.
    pub pid: u32,
    pub started: DateTime<Utc>,
    #[serde(default)]
    pub resumed: u32,
}

/// Contents of `result.json`, written when a run finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummaryFile {
    pub id: String,
    pub states: StateMap,
    pub events_log: PathBuf,
    pub wall_time_secs: f64,
    pub finished: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    /// A live coordinator is driving it.
    Running,
    Finished,
    /// No live coordinator and no result: crashed or killed; resumable.
    Interrupted,
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunStatus::Running => "running",
            RunStatus::Finished => "finished",
            RunStatus::Interrupted => "interrupted",
        })
    }
}

/// Listing entry for a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOverview {
    pub id: String,
    pub status: RunStatus,
    pub started: Option<DateTime<Utc>>,
    pub instances: usize,
    pub counts: std::collections::BTreeMap<TaskState, usize>,
    pub last_seq: u64,
}

#[derive(Debug, Error)]
pub enum RunDirError {
    #[error("no run `{0}`")]
    UnknownRun(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Read-only accessor for one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub id: String,
    pub path: PathBuf,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> io::Result<Option<T>> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(io::Error::other),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

impl RunDir {
    /// Opens an existing run by id.
    pub fn open(workdir: &Path, run_id: &str) -> Result<Self, RunDirError> {
        let path = run_dir(workdir, run_id);
        if !valid_run_id(run_id) || !path.join(EVENTS_FILE).exists() {
            return Err(RunDirError::UnknownRun(run_id.to_string()));
        }
        Ok(Self {
            id: run_id.to_string(),
            path,
        })
    }

    pub fn events(&self) -> Result<Vec<Event>, RunDirError> {
        Ok(read_events(&self.path.join(EVENTS_FILE))?)
    }

    /// Instance states as the fold of the event log.
    pub fn states(&self) -> Result<(Vec<Event>, StateMap), RunDirError> {
        let events = self.events()?;
        let states = fold_events(&events)?;
        Ok((events, states))
    }

    pub fn info(&self) -> io::Result<Option<RunInfo>> {
        read_json(&self.path.join(RUN_FILE))
    }

    pub fn result(&self) -> io::Result<Option<RunSummaryFile>> {
        read_json(&self.path.join(RESULT_FILE))
    }

    /// Live graph with states taken from the event log.
    pub fn graph(&self) -> Result<GraphView, RunDirError> {
        let (_, states) = self.states()?;
        let mut view: GraphView = read_json(&self.path.join(GRAPH_FILE))?.unwrap_or_default();
        for node in &mut view.nodes {
            node.state = states.get(&node.id).copied();
        }
        Ok(view)
    }

    pub fn spec_source(&self) -> io::Result<String> {
        fs::read_to_string(self.path.join(SPEC_FILE))
    }

    pub fn status(&self) -> RunStatus {
        if self.path.join(RESULT_FILE).exists() {
            return RunStatus::Finished;
        }
        match self.info() {
            Ok(Some(info)) if process_alive(info.pid) => RunStatus::Running,
            _ => RunStatus::Interrupted,
        }
    }

    pub fn overview(&self) -> Result<RunOverview, RunDirError> {
        let (events, states) = self.states()?;
        let mut counts = std::collections::BTreeMap::new();
        for s in states.values() {
            *counts.entry(*s).or_insert(0) += 1;
        }
        Ok(RunOverview {
            id: self.id.clone(),
            status: self.status(),
            started: self.info()?.map(|i| i.started),
            instances: states.len(),
            counts,
            last_seq: events.last().map_or(0, |e| e.seq),
        })
    }
}

/// Every run under `workdir`, oldest id first.
pub fn list_runs(workdir: &Path) -> io::Result<Vec<RunDir>> {
    let entries = match fs::read_dir(workdir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut runs = Vec::new();
    for entry in entries {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("run-") {
            if let Ok(run) = RunDir::open(workdir, id) {
                runs.push(run);
            }
        }
    }
    runs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(runs)
}

pub fn write_run_info(run_dir: &Path, info: &RunInfo) -> io::Result<()> {
    write_json_atomic(&run_dir.join(RUN_FILE), info)
}

pub fn inbox_dir(run_dir: &Path) -> PathBuf {
    run_dir.join(DECISIONS_DIR).join(INBOX_DIR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub request_id: String,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub request_id: String,
    pub result: Result<DecisionOutcome, DecisionError>,
}

/// Drops a decision into the run's inbox and returns the request id.
pub fn submit_request(run_dir: &Path, decision: &Decision) -> io::Result<String> {
    let request_id = format!(
        "{}-{}-{:08x}",
        Utc::now().format("%Y%m%dT%H%M%S%.6f"),
        std::process::id(),
        rand::thread_rng().gen::<u32>()
    );
    let request = DecisionRequest {
        request_id: request_id.clone(),
        decision: decision.clone(),
    };
    write_json_atomic(&inbox_dir(run_dir).join(format!("{request_id}.request.json")), &request)?;
    Ok(request_id)
}

fn outcome_path(run_dir: &Path, request_id: &str) -> PathBuf {
    inbox_dir(run_dir).join(format!("{request_id}.outcome.json"))
}

pub fn write_outcome(run_dir: &Path, outcome: &RequestOutcome) -> io::Result<()> {
    write_json_atomic(&outcome_path(run_dir, &outcome.request_id), outcome)
}

/// Pending requests in submission order.
pub fn pending_requests(run_dir: &Path) -> io::Result<Vec<PathBuf>> {
    let entries = match fs::read_dir(inbox_dir(run_dir)) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.to_string_lossy().ends_with(".request.json") {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Waits for the outcome of a request; the outcome file is consumed.
pub fn wait_outcome(run_dir: &Path, request_id: &str, timeout: Duration) -> io::Result<Option<RequestOutcome>> {
    match await_outcome(run_dir, request_id, timeout, || true)? {
        Awaited::Answered(outcome) => Ok(Some(outcome)),
        Awaited::TimedOut | Awaited::Abandoned => Ok(None),
    }
}

enum Awaited {
    Answered(RequestOutcome),
    TimedOut,
    /// `alive` turned false before an answer arrived.
    Abandoned,
}

fn await_outcome(
    run_dir: &Path,
    request_id: &str,
    timeout: Duration,
    alive: impl Fn() -> bool,
) -> io::Result<Awaited> {
    let path = outcome_path(run_dir, request_id);
    let start = Instant::now();
    let mut polls = 0u32;
    loop {
        if let Some(outcome) = read_json::<RequestOutcome>(&path)? {
            let _ = fs::remove_file(&path);
            return Ok(Awaited::Answered(outcome));
        }
        if start.elapsed() >= timeout {
            return Ok(Awaited::TimedOut);
        }
        polls += 1;
        if polls.is_multiple_of(5) && !alive() {
            // the loop may have answered just before exiting
            if let Some(outcome) = read_json::<RequestOutcome>(&path)? {
                let _ = fs::remove_file(&path);
                return Ok(Awaited::Answered(outcome));
            }
            return Ok(Awaited::Abandoned);
        }
        thread::sleep(Duration::from_millis(20));
    }
}

fn withdraw(run_dir: &Path, request_id: &str) {
    let _ = fs::remove_file(inbox_dir(run_dir).join(format!("{request_id}.request.json")));
}

/// Hands a decision to the live coordinator of a run and waits for its answer.
pub fn decide_via_inbox(
    run_dir: &Path,
    decision: &Decision,
    timeout: Duration,
) -> Result<DecisionOutcome, DecisionError> {
    let io_err = |e: io::Error| DecisionError::Unavailable(e.to_string());
    let request_id = submit_request(run_dir, decision).map_err(io_err)?;
    match wait_outcome(run_dir, &request_id, timeout).map_err(io_err)? {
        Some(outcome) => outcome.result,
        None => {
            // withdraw the request unless the loop already took it
            withdraw(run_dir, &request_id);
            Err(DecisionError::Unavailable(
                "the run did not answer; is its coordinator running?".into(),
            ))
        }
    }
}

/// Whether `instance` is a checkpoint of this run with a recorded decision.
pub fn decision_recorded(run: &RunDir, instance: &InstanceId) -> bool {
    let Some(spec) = run.spec_source().ok().and_then(|s| load_spec(&s).ok()) else {
        return false;
    };
    spec.task(instance.base())
        .is_some_and(|decl| matches!(read_decision(&run.path, decl, instance), Ok(Some(_))))
}

/// Delivers a decision to a run. A run with a live coordinator gets it
/// through the inbox; otherwise (including a coordinator that exits while
/// the request waits) the refusal the coordinator would give is
/// reconstructed from the run's files, or `Unavailable` if the checkpoint
/// is still waiting and the run must be resumed first.
pub fn decide(run: &RunDir, decision: &Decision, timeout: Duration) -> Result<DecisionOutcome, DecisionError> {
    if run.status() == RunStatus::Running {
        let io_err = |e: io::Error| DecisionError::Unavailable(e.to_string());
        let request_id = submit_request(&run.path, decision).map_err(io_err)?;
        match await_outcome(&run.path, &request_id, timeout, || run.status() == RunStatus::Running).map_err(io_err)? {
            Awaited::Answered(outcome) => return outcome.result,
            Awaited::TimedOut => {
                withdraw(&run.path, &request_id);
                return Err(DecisionError::Unavailable(
                    "the run did not answer; is its coordinator running?".into(),
                ));
            }
            Awaited::Abandoned => withdraw(&run.path, &request_id),
        }
    }
    let instance = &decision.instance;
    let (_, states) = run.states().map_err(|e| DecisionError::Unavailable(e.to_string()))?;
    let Some(state) = states.get(instance) else {
        return Err(DecisionError::UnknownInstance(instance.to_string()));
    };
    if decision_recorded(run, instance) {
        return Err(DecisionError::DuplicateDecision(instance.to_string()));
    }
    if *state != TaskState::AwaitingDecision {
        return Err(DecisionError::NotAwaiting {
            instance: instance.to_string(),
            state: state.to_string(),
        });
    }
    Err(DecisionError::Unavailable(format!(
        "run {} has no live coordinator; resume it to deliver decisions",
        run.id
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hitl::Verdict;
    use crate::ids::InstanceId;

    #[test]
    fn run_ids_are_path_safe() {
        let id = new_run_id();
        assert!(valid_run_id(&id), "{id}");
        assert!(!valid_run_id("../etc"));
        assert!(!valid_run_id(""));
    }

    #[test]
    fn unknown_run_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(RunDir::open(dir.path(), "nope"), Err(RunDirError::UnknownRun(_))));
        assert!(list_runs(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn inbox_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Decision::new(InstanceId::first("c"), Verdict::Approve);
        let id = submit_request(dir.path(), &d).unwrap();
        let pending = pending_requests(dir.path()).unwrap();
        assert_eq!(pending.len(), 1);
        let req: DecisionRequest = serde_json::from_slice(&fs::read(&pending[0]).unwrap()).unwrap();
        assert_eq!(req.request_id, id);
        write_outcome(
            dir.path(),
            &RequestOutcome {
                request_id: id.clone(),
                result: Err(DecisionError::UnknownInstance("c#1".into())),
            },
        )
        .unwrap();
        let out = wait_outcome(dir.path(), &id, Duration::from_secs(1)).unwrap().unwrap();
        assert_eq!(out.result.unwrap_err().code(), "UnknownInstance");
    }

    #[test]
    fn unanswered_request_times_out() {
        let dir = tempfile::tempdir().unwrap();
        let d = Decision::new(InstanceId::first("c"), Verdict::Approve);
        let err = decide_via_inbox(dir.path(), &d, Duration::from_millis(50)).unwrap_err();
        assert_eq!(err.code(), "Unavailable");
        assert!(pending_requests(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn wait_gives_up_when_the_coordinator_is_gone() {
        let dir = tempfile::tempdir().unwrap();
        let d = Decision::new(InstanceId::first("c"), Verdict::Approve);
        let id = submit_request(dir.path(), &d).unwrap();
        let start = std::time::Instant::now();
        let got = await_outcome(dir.path(), &id, Duration::from_secs(10), || false).unwrap();
        assert!(matches!(got, Awaited::Abandoned));
        assert!(start.elapsed() < Duration::from_secs(2));
    }
}
