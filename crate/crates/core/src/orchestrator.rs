//! The coordination loop: schedule ready instances, dispatch them to their
//! execsite's backend, react to completions and decisions, repeat until every
//! instance is terminal.
//!
//! One thread owns the registry and the live graph. Watchers, API handlers
//! and CLI clients never touch them; they send [`LoopEvent`]s (or drop
//! decision requests into the run's inbox), and the loop applies them one at
//! a time. Nothing in the loop waits for a task to finish.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use chrono::Utc;
use log::{debug, info, warn};
use thiserror::Error;

use crate::backend::{BackendContext, BackendError, BackendRegistry, ExecBackend};
use crate::config::{format_duration, load_spec, SpecError, TaskDecl, WorkflowSpec};
use crate::exec_local::{build_plan, marker_path, status_dir, task_dir, verify_outputs, InstanceParams, LaunchPlan};
use crate::fsutil::{write_atomic, write_json_atomic};
use crate::graph::LiveGraph;
use crate::hitl::{
    self, apply_overrides, check_overrides, check_permitted, close_prompt, open_checkpoint, read_decision,
    record_decision, Decision, DecisionError, DecisionOutcome, Verdict,
};
use crate::ids::InstanceId;
use crate::modules::ModuleRegistry;
use crate::registry::{Event, JobRegistry, RegistryError, StateMap, TaskState, EVENTS_FILE};
use crate::rundir::{
    self, pending_requests, write_outcome, write_run_info, DecisionRequest, RequestOutcome, RunInfo,
    RunSummaryFile, GRAPH_FILE, HANDLE_FILE, RESULT_FILE, SPEC_FILE,
};
use crate::watcher::{run_watch_loop, ExpectedSet, WatchEvent, WatchLoop, WatchTarget};

/// Receives every event the run records, in order, from the loop thread.
pub type Observer = Arc<dyn Fn(&Event) + Send + Sync>;

#[derive(Clone)]
pub struct RunConfig {
    /// Directory holding `run-<id>/` directories.
    pub workdir: PathBuf,
    /// Generated when absent.
    pub run_id: Option<String>,
    /// Replaces the seed of every simulated batch site.
    pub seed: Option<u64>,
    /// Concurrent instances on local-strategy sites.
    pub max_local: usize,
    /// Upper bound on how long the loop sleeps between inbox and timeout checks.
    pub tick: Duration,
    pub backends: BackendRegistry,
    pub modules: Arc<ModuleRegistry>,
    pub observer: Option<Observer>,
    /// Original workflow text, saved as `spec.toml`; regenerated from the spec when absent.
    pub spec_source: Option<String>,
    /// Refuse to launch instances whose declared inputs are missing.
    pub check_inputs: bool,
}

impl std::fmt::Debug for RunConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunConfig")
            .field("workdir", &self.workdir)
            .field("run_id", &self.run_id)
            .field("seed", &self.seed)
            .field("max_local", &self.max_local)
            .field("tick", &self.tick)
            .field("backends", &self.backends)
            .finish_non_exhaustive()
    }
}

impl RunConfig {
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        Self {
            workdir: workdir.into(),
            run_id: None,
            seed: None,
            max_local: thread::available_parallelism().map_or(4, |n| n.get()),
            tick: Duration::from_millis(50),
            backends: BackendRegistry::with_builtins(),
            modules: Arc::new(ModuleRegistry::with_builtins()),
            observer: None,
            spec_source: None,
            check_inputs: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("execsite `{site}` is unavailable: {message}")]
    SiteUnavailable { site: String, message: String },
    #[error("run `{0}` already exists")]
    RunExists(String),
    #[error("invalid run id `{0}`")]
    InvalidRunId(String),
    #[error("run directory {} is not resumable: {reason}", path.display())]
    NotResumable { path: PathBuf, reason: String },
    #[error("internal invariant violated: {0}")]
    InternalInvariantViolation(String),
    #[error("recovery failed: {0}")]
    Recovery(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run_id: String,
    pub run_dir: PathBuf,
    /// Final state of every instance.
    pub states: StateMap,
    pub event_log: PathBuf,
    pub wall_time: Duration,
}

impl RunResult {
    pub fn all_succeeded(&self) -> bool {
        self.states.values().all(|s| *s == TaskState::Succeeded)
    }

    pub fn count(&self, state: TaskState) -> usize {
        self.states.values().filter(|s| **s == state).count()
    }
}

/// Inputs to the coordination loop.
pub enum LoopEvent {
    Watch(WatchEvent),
    Decision(Decision, Sender<Result<DecisionOutcome, DecisionError>>),
    /// Cancels a non-terminal instance and everything downstream of it.
    Cancel(InstanceId),
    /// Cancels every non-terminal instance, ending the run.
    CancelRun,
}

/// Handle on a run whose loop is executing on a background thread.
pub struct RunHandle {
    pub run_id: String,
    pub run_dir: PathBuf,
    tx: Sender<LoopEvent>,
    thread: Option<thread::JoinHandle<Result<RunResult, RunError>>>,
}

impl std::fmt::Debug for RunHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunHandle")
            .field("run_id", &self.run_id)
            .field("run_dir", &self.run_dir)
            .finish_non_exhaustive()
    }
}

impl RunHandle {
    /// Submits a decision and waits for the loop to validate and apply it.
    pub fn decide(&self, decision: Decision) -> Result<DecisionOutcome, DecisionError> {
        let (reply_tx, reply_rx) = mpsc::channel();
        self.tx
            .send(LoopEvent::Decision(decision, reply_tx))
            .map_err(|_| DecisionError::Unavailable("run has finished".into()))?;
        reply_rx
            .recv()
            .map_err(|_| DecisionError::Unavailable("run has finished".into()))?
    }

    pub fn cancel(&self, instance: InstanceId) {
        let _ = self.tx.send(LoopEvent::Cancel(instance));
    }

    pub fn cancel_run(&self) {
        let _ = self.tx.send(LoopEvent::CancelRun);
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(|t| t.is_finished())
    }

    /// Blocks until the run ends.
    pub fn wait(mut self) -> Result<RunResult, RunError> {
        let thread = self.thread.take().expect("run thread joined once");
        thread
            .join()
            .unwrap_or_else(|_| Err(RunError::InternalInvariantViolation("coordination loop panicked".into())))
    }
}

pub struct Orchestrator;

impl Orchestrator {
    /// Creates `run-<id>/` under the configured workdir and starts the loop.
    pub fn start(spec: WorkflowSpec, config: RunConfig) -> Result<RunHandle, RunError> {
        crate::config::validate_acyclic(&spec)?;
        let run_id = config.run_id.clone().unwrap_or_else(rundir::new_run_id);
        if !rundir::valid_run_id(&run_id) {
            return Err(RunError::InvalidRunId(run_id));
        }
        let run_dir = rundir::run_dir(&config.workdir, &run_id);
        if run_dir.join(EVENTS_FILE).exists() {
            return Err(RunError::RunExists(run_id));
        }
        fs::create_dir_all(&run_dir)?;
        let source = config.spec_source.clone().unwrap_or_else(|| spec.to_toml());
        write_atomic(&run_dir.join(SPEC_FILE), source.as_bytes())?;
        write_run_info(
            &run_dir,
            &RunInfo {
                id: run_id.clone(),
                pid: std::process::id(),
                started: Utc::now(),
                resumed: 0,
            },
        )?;

        let registry = JobRegistry::create(&run_dir)?;
        let graph = LiveGraph::build_initial(&spec);
        let params = spec
            .initial_active
            .iter()
            .map(|n| (InstanceId::first(n.clone()), InstanceParams::from_decl(&spec.tasks[n])))
            .collect();
        let (mut engine, rx) = Engine::new(spec, run_id, run_dir, registry, graph, params, &config)?;
        for id in engine.graph.creation_order().to_vec() {
            engine.register(id, "initial")?;
        }
        engine.write_graph()?;
        Ok(engine.spawn(rx))
    }

    /// Continues an interrupted run from its directory.
    ///
    /// The registry is rebuilt from `events.log` and the graph from the log
    /// plus recorded decisions. Instances that were in flight are resolved
    /// without dispatching them again: a marker already on disk is picked up
    /// by the watcher, a still-running local process is adopted, anything
    /// else is marked Failed with an unknown exit.
    pub fn resume(run_dir: &Path, config: RunConfig) -> Result<RunHandle, RunError> {
        let source = fs::read_to_string(run_dir.join(SPEC_FILE))
            .map_err(|e| not_resumable(run_dir, format!("spec.toml: {e}")))?;
        if run_dir.join(RESULT_FILE).exists() {
            return Err(not_resumable(run_dir, "run already finished"));
        }
        let spec = load_spec(&source)?;
        let run_id = run_dir
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("run-"))
            .map(str::to_string)
            .ok_or_else(|| not_resumable(run_dir, "not a run directory"))?;
        let previous = rundir::RunDir {
            id: run_id.clone(),
            path: run_dir.to_path_buf(),
        }
        .info()?;
        if let Some(info) = &previous {
            if info.pid != std::process::id() && crate::exec_local::process_alive(info.pid) {
                return Err(not_resumable(
                    run_dir,
                    format!("coordinator pid {} is still running", info.pid),
                ));
            }
        }
        write_run_info(
            run_dir,
            &RunInfo {
                id: run_id.clone(),
                pid: std::process::id(),
                started: previous.as_ref().map_or_else(Utc::now, |i| i.started),
                resumed: previous.as_ref().map_or(0, |i| i.resumed) + 1,
            },
        )?;

        let (registry, report) = JobRegistry::recover(run_dir)?;
        info!(
            "recovered {} events{}",
            report.events,
            if report.dropped_tail { " (dropped a torn final record)" } else { "" }
        );
        let (graph, params) = rebuild_graph(&spec, registry.events(), run_dir)?;
        let (mut engine, rx) = Engine::new(spec, run_id, run_dir.to_path_buf(), registry, graph, params, &config)?;
        engine.reconcile()?;
        engine.write_graph()?;
        Ok(engine.spawn(rx))
    }
}

fn not_resumable(path: &Path, reason: impl Into<String>) -> RunError {
    RunError::NotResumable {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Runs a workflow to completion.
pub fn run_workflow(spec: WorkflowSpec, config: RunConfig) -> Result<RunResult, RunError> {
    Orchestrator::start(spec, config)?.wait()
}

/// Replays the event log against the spec and the recorded decisions: each
/// checkpoint's decision is re-applied at the point its Succeeded event
/// was recorded, so generations and edges come out exactly as they were.
pub fn rebuild_graph(
    spec: &WorkflowSpec,
    events: &[Event],
    run_dir: &Path,
) -> Result<(LiveGraph, BTreeMap<InstanceId, InstanceParams>), RunError> {
    let mut graph = LiveGraph::build_initial(spec);
    let mut params: BTreeMap<InstanceId, InstanceParams> = spec
        .initial_active
        .iter()
        .map(|n| (InstanceId::first(n.clone()), InstanceParams::from_decl(&spec.tasks[n])))
        .collect();
    for event in events {
        if event.from.is_none() && !graph.contains(&event.instance) {
            return Err(RunError::Recovery(format!(
                "{} is registered in the log but no recorded decision creates it",
                event.instance
            )));
        }
        if !event.to.is_terminal() {
            continue;
        }
        graph.retire(&event.instance);
        let Some(decl) = spec.task(event.instance.base()) else {
            return Err(RunError::Recovery(format!("{} is not declared", event.instance)));
        };
        if event.to != TaskState::Succeeded || !decl.is_checkpoint() {
            continue;
        }
        let decision = read_decision(run_dir, decl, &event.instance)?.ok_or_else(|| {
            RunError::Recovery(format!("{} succeeded but its decision file is missing", event.instance))
        })?;
        let added = graph
            .apply_additions(spec, &decision.add_tasks, &event.instance)
            .map_err(|e| RunError::Recovery(e.to_string()))?;
        let added_params = apply_overrides(spec, &added, &decision.param_overrides)
            .map_err(|e| RunError::Recovery(e.to_string()))?;
        params.extend(added_params);
    }
    Ok((graph, params))
}

struct Engine {
    spec: WorkflowSpec,
    run_id: String,
    run_dir: PathBuf,
    registry: JobRegistry,
    graph: LiveGraph,
    params: BTreeMap<InstanceId, InstanceParams>,
    /// Backend per site name.
    backends: BTreeMap<String, Box<dyn ExecBackend>>,
    expected: ExpectedSet,
    handles: BTreeMap<InstanceId, String>,
    awaiting_since: BTreeMap<InstanceId, Instant>,
    watch: Option<WatchLoop>,
    tx: Sender<LoopEvent>,
    max_local: usize,
    tick: Duration,
    check_inputs: bool,
    observer: Option<Observer>,
    started: Instant,
}

impl Engine {
    fn new(
        spec: WorkflowSpec,
        run_id: String,
        run_dir: PathBuf,
        registry: JobRegistry,
        graph: LiveGraph,
        params: BTreeMap<InstanceId, InstanceParams>,
        config: &RunConfig,
    ) -> Result<(Self, Receiver<LoopEvent>), RunError> {
        for dir in [hitl::PROMPTS_DIR, crate::exec_local::TASKS_DIR] {
            fs::create_dir_all(run_dir.join(dir))?;
        }
        fs::create_dir_all(rundir::inbox_dir(&run_dir))?;

        let ctx = BackendContext {
            run_dir: run_dir.clone(),
            modules: config.modules.clone(),
            seed_override: config.seed,
        };
        let used: BTreeSet<&str> = spec.tasks.values().map(|t| t.execsite.as_str()).collect();
        let mut backends = BTreeMap::new();
        let mut targets = Vec::new();
        for name in used {
            let site = spec.site(name).expect("execsites are resolved at parse time");
            let status = status_dir(&run_dir, site);
            fs::create_dir_all(&status).map_err(|e| RunError::SiteUnavailable {
                site: name.to_string(),
                message: format!("{}: {e}", status.display()),
            })?;
            let backend = config.backends.create(site, &ctx).map_err(|e| RunError::SiteUnavailable {
                site: name.to_string(),
                message: e.to_string(),
            })?;
            backends.insert(name.to_string(), backend);
            targets.push(WatchTarget {
                site: name.to_string(),
                status_dir: status,
                poll_interval: site.poll_interval,
            });
        }

        let (tx, rx) = mpsc::channel();
        let expected: ExpectedSet = Arc::new(Mutex::new(BTreeMap::new()));
        let notify_tx = Mutex::new(tx.clone());
        let watch = run_watch_loop(
            targets,
            expected.clone(),
            Arc::new(move |e| {
                let _ = notify_tx.lock().unwrap_or_else(|p| p.into_inner()).send(LoopEvent::Watch(e));
            }),
        );

        Ok((
            Self {
                spec,
                run_id,
                run_dir,
                registry,
                graph,
                params,
                backends,
                expected,
                handles: BTreeMap::new(),
                awaiting_since: BTreeMap::new(),
                watch: Some(watch),
                tx,
                max_local: config.max_local.max(1),
                tick: config.tick,
                check_inputs: config.check_inputs,
                observer: config.observer.clone(),
                started: Instant::now(),
            },
            rx,
        ))
    }

    fn spawn(self, rx: Receiver<LoopEvent>) -> RunHandle {
        let run_id = self.run_id.clone();
        let run_dir = self.run_dir.clone();
        let tx = self.tx.clone();
        let thread = thread::Builder::new()
            .name(format!("run-{run_id}"))
            .spawn(move || self.run(rx))
            .expect("spawn coordination loop");
        RunHandle {
            run_id,
            run_dir,
            tx,
            thread: Some(thread),
        }
    }

    // ---- registry plumbing -------------------------------------------------

    fn emit(&self, event: &Event) {
        if let Some(observer) = &self.observer {
            observer(event);
        }
    }

    fn register(&mut self, id: InstanceId, detail: &str) -> Result<(), RunError> {
        let event = self
            .registry
            .register(id, detail)
            .map_err(|e| RunError::InternalInvariantViolation(e.to_string()))?;
        self.emit(&event);
        Ok(())
    }

    fn transition(&mut self, id: &InstanceId, to: TaskState, detail: impl Into<String>) -> Result<(), RunError> {
        match self.registry.transition(id, to, detail) {
            Ok(Some(event)) => {
                self.emit(&event);
                if to.is_terminal() {
                    self.graph.retire(id);
                }
                Ok(())
            }
            Ok(None) => Ok(()),
            Err(RegistryError::Io(e)) => Err(RunError::Io(e)),
            Err(e) => Err(RunError::InternalInvariantViolation(e.to_string())),
        }
    }

    fn state(&self, id: &InstanceId) -> Option<TaskState> {
        self.registry.state(id)
    }

    fn decl(&self, id: &InstanceId) -> TaskDecl {
        self.spec.tasks[id.base()].clone()
    }

    fn write_graph(&self) -> io::Result<()> {
        write_json_atomic(&self.run_dir.join(GRAPH_FILE), &self.graph.view(&self.registry.snapshot()))
    }

    fn expect(&self, id: &InstanceId, site: &str) {
        self.expected
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id.clone(), site.to_string());
    }

    fn unexpect(&self, id: &InstanceId) {
        self.expected.lock().unwrap_or_else(|p| p.into_inner()).remove(id);
    }

    fn strategy_of(&self, decl: &TaskDecl) -> String {
        BackendRegistry::strategy_for(self.spec.site_for(decl)).to_string()
    }

    // ---- scheduling ----------------------------------------------------------

    fn schedule(&mut self) -> Result<(), RunError> {
        self.cancel_orphans()?;
        for id in self.graph.ready_set(&self.registry.snapshot()) {
            self.transition(&id, TaskState::Ready, "dependencies satisfied")?;
        }

        let mut local_busy = self
            .registry
            .instances()
            .filter(|(id, s)| {
                matches!(s, TaskState::Submitted | TaskState::Running) && {
                    let decl = &self.spec.tasks[id.base()];
                    !decl.is_checkpoint() && BackendRegistry::strategy_for(self.spec.site_for(decl)) == "local"
                }
            })
            .count();

        let mut batches: BTreeMap<String, Vec<LaunchPlan>> = BTreeMap::new();
        for id in self.graph.creation_order().to_vec() {
            if self.state(&id) != Some(TaskState::Ready) {
                continue;
            }
            let decl = self.decl(&id);
            if decl.is_checkpoint() {
                self.open_checkpoint(&id, &decl)?;
                continue;
            }
            let site = self.spec.site_for(&decl).clone();
            let strategy = self.strategy_of(&decl);
            if strategy == "local" {
                if local_busy >= self.max_local {
                    continue;
                }
                local_busy += 1;
            }
            self.transition(
                &id,
                TaskState::Submitted,
                format!("site={} kind={} backend={strategy}", site.name, site.kind),
            )?;
            match build_plan(&decl, &self.params[&id], &id, &site, &self.run_dir, self.check_inputs) {
                Ok(plan) => {
                    self.expect(&id, &site.name);
                    batches.entry(site.name.clone()).or_default().push(plan);
                }
                Err(e) => self.fail(&id, format!("launch refused: {e}"))?,
            }
        }

        for (site, plans) in batches {
            let backend = self.backends.get_mut(&site).expect("backend exists for every used site");
            let results = backend.submit_all(&plans);
            for (plan, result) in plans.iter().zip(results) {
                let id = &plan.instance;
                match result {
                    Ok(sub) => {
                        debug!("{id}: submitted as {}", sub.handle);
                        if let Err(e) = write_atomic(&task_dir(&self.run_dir, id).join(HANDLE_FILE), sub.handle.as_bytes()) {
                            warn!("{id}: cannot record backend handle: {e}");
                        }
                        self.handles.insert(id.clone(), sub.handle.clone());
                        if sub.started {
                            self.transition(id, TaskState::Running, sub.handle)?;
                        }
                    }
                    Err(e) => {
                        self.unexpect(id);
                        self.fail(id, format!("submission failed: {e}"))?;
                    }
                }
            }
        }
        Ok(())
    }

    fn open_checkpoint(&mut self, id: &InstanceId, decl: &TaskDecl) -> Result<(), RunError> {
        if self.state(id) == Some(TaskState::Ready) {
            self.transition(id, TaskState::Submitted, "checkpoint")?;
        }
        if self.state(id) == Some(TaskState::Submitted) {
            self.transition(id, TaskState::Running, "checkpoint opened")?;
        }
        let prompt = open_checkpoint(&self.run_dir, decl, id)?;
        self.awaiting_since.insert(id.clone(), Instant::now());
        self.transition(
            id,
            TaskState::AwaitingDecision,
            format!("awaiting decision: {}", prompt.message.trim()),
        )
    }

    fn fail(&mut self, id: &InstanceId, detail: String) -> Result<(), RunError> {
        self.transition(id, TaskState::Failed, detail)?;
        self.cancel_downstream(id, &format!("dependency {id} failed"))
    }

    /// Pending instances that can never become ready because a dependency
    /// already failed or was cancelled, e.g. an instance added after its
    /// dependency's failure.
    fn cancel_orphans(&mut self) -> Result<(), RunError> {
        for id in self.graph.creation_order().to_vec() {
            if self.state(&id) != Some(TaskState::Pending) {
                continue;
            }
            let dead = self
                .graph
                .dependencies(&id)
                .find(|d| matches!(self.state(d), Some(TaskState::Failed | TaskState::Cancelled)))
                .cloned();
            if let Some(dep) = dead {
                let verb = if self.state(&dep) == Some(TaskState::Failed) { "failed" } else { "cancelled" };
                self.cancel_instance(&id, &format!("dependency {dep} {verb}"))?;
            }
        }
        Ok(())
    }

    fn cancel_downstream(&mut self, id: &InstanceId, reason: &str) -> Result<(), RunError> {
        let downstream = self.graph.downstream(id);
        let order: Vec<InstanceId> = self
            .graph
            .creation_order()
            .iter()
            .filter(|i| downstream.contains(*i))
            .cloned()
            .collect();
        for d in order {
            self.cancel_instance(&d, reason)?;
        }
        Ok(())
    }

    fn cancel_instance(&mut self, id: &InstanceId, reason: &str) -> Result<(), RunError> {
        let Some(state) = self.state(id) else {
            return Ok(());
        };
        match state {
            s if s.is_terminal() => return Ok(()),
            TaskState::Submitted | TaskState::Running => {
                self.unexpect(id);
                let site = self.spec.tasks[id.base()].execsite.clone();
                if let Some(backend) = self.backends.get_mut(&site) {
                    if let Err(e) = backend.cancel(id) {
                        debug!("{id}: backend cancel: {e}");
                    }
                }
            }
            TaskState::AwaitingDecision => {
                close_prompt(&self.run_dir, id)?;
                self.awaiting_since.remove(id);
            }
            _ => {}
        }
        self.transition(id, TaskState::Cancelled, reason)
    }

    // ---- events ----------------------------------------------------------------

    fn handle(&mut self, event: LoopEvent) -> Result<(), RunError> {
        match event {
            LoopEvent::Watch(WatchEvent::Completed(c)) => self.on_completion(&c.instance, c.exit_code),
            LoopEvent::Watch(WatchEvent::SiteHealth {
                site,
                consecutive_failures,
                error,
            }) => {
                match error {
                    Some(e) => warn!("execsite {site} unhealthy after {consecutive_failures} failed polls: {e}"),
                    None => info!("execsite {site} recovered"),
                }
                Ok(())
            }
            LoopEvent::Decision(decision, reply) => {
                let result = self.handle_decision(decision, false)?;
                let _ = reply.send(result);
                Ok(())
            }
            LoopEvent::Cancel(id) => {
                self.cancel_instance(&id, "cancelled by request")?;
                self.cancel_downstream(&id, &format!("dependency {id} cancelled"))
            }
            LoopEvent::CancelRun => {
                for id in self.graph.creation_order().to_vec() {
                    self.cancel_instance(&id, "run cancelled")?;
                }
                Ok(())
            }
        }
    }

    fn on_completion(&mut self, id: &InstanceId, exit_code: Option<i32>) -> Result<(), RunError> {
        self.unexpect(id);
        let state = self.state(id);
        if !matches!(state, Some(TaskState::Submitted | TaskState::Running)) {
            debug!("{id}: ignoring completion in state {state:?}");
            return Ok(());
        }
        if state == Some(TaskState::Submitted) {
            let detail = match self.handles.get(id) {
                Some(h) => format!("{h} started"),
                None => "started".to_string(),
            };
            self.transition(id, TaskState::Running, detail)?;
        }
        match exit_code {
            Some(0) => match verify_outputs(&self.params[id], &self.run_dir) {
                Ok(()) => self.transition(id, TaskState::Succeeded, "exit 0"),
                Err(missing) => self.fail(id, format!("exit 0 but {missing}")),
            },
            Some(code) => self.fail(id, format!("exit {code}")),
            None => self.fail(id, "exit code unknown".to_string()),
        }
    }

    /// Validates and applies a decision. `replay` re-applies a decision whose
    /// file was recorded by an earlier coordinator.
    fn handle_decision(
        &mut self,
        decision: Decision,
        replay: bool,
    ) -> Result<Result<DecisionOutcome, DecisionError>, RunError> {
        let id = decision.instance.clone();
        let Some(state) = self.state(&id) else {
            return Ok(Err(DecisionError::UnknownInstance(id.to_string())));
        };
        let decl = self.decl(&id);
        if !replay && decl.is_checkpoint() && read_decision(&self.run_dir, &decl, &id)?.is_some() {
            return Ok(Err(DecisionError::DuplicateDecision(id.to_string())));
        }
        if state != TaskState::AwaitingDecision {
            return Ok(Err(DecisionError::NotAwaiting {
                instance: id.to_string(),
                state: state.to_string(),
            }));
        }
        if let Err(e) = check_permitted(&decl, &decision) {
            return Ok(Err(e));
        }
        if let Err(e) = check_overrides(&self.spec, &decision.add_tasks, &decision.param_overrides) {
            return Ok(Err(e));
        }
        for s in &decision.skip {
            let skippable = matches!(self.state(s), Some(TaskState::Pending | TaskState::Ready));
            if !skippable || *s == id {
                return Ok(Err(DecisionError::InvalidSkip(
                    s.to_string(),
                    "only pending instances can be skipped".into(),
                )));
            }
        }

        let decision_path = if replay {
            hitl::decision_path(&self.run_dir, &decl, &id)
        } else {
            record_decision(&self.run_dir, &decl, &decision)?
        };
        close_prompt(&self.run_dir, &id)?;
        self.awaiting_since.remove(&id);

        let summary = decision.summary();
        let mut added = Vec::new();
        if decision.verdict == Verdict::Abort {
            self.fail(&id, summary)?;
        } else {
            self.transition(&id, TaskState::Succeeded, summary)?;
            added = self
                .graph
                .apply_additions(&self.spec, &decision.add_tasks, &id)
                .map_err(|e| RunError::InternalInvariantViolation(format!("validated addition refused: {e}")))?;
            let params = apply_overrides(&self.spec, &added, &decision.param_overrides)
                .map_err(|e| RunError::InternalInvariantViolation(format!("validated overrides refused: {e}")))?;
            self.params.extend(params);
            for new in &added {
                self.register(new.clone(), &format!("added by {id}"))?;
            }
            self.write_graph()?;
        }
        for s in &decision.skip {
            self.cancel_instance(s, &format!("skipped by decision at {id}"))?;
            self.cancel_downstream(s, &format!("dependency {s} skipped"))?;
        }
        Ok(Ok(DecisionOutcome {
            instance: id.clone(),
            verdict: decision.verdict,
            state: self.state(&id).expect("decided instance is registered"),
            added,
            skipped: decision.skip.clone(),
            decision_path,
        }))
    }

    fn poll_inbox(&mut self) -> Result<(), RunError> {
        for path in pending_requests(&self.run_dir)? {
            let bytes = match fs::read(&path) {
                Ok(b) => b,
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e.into()),
            };
            let _ = fs::remove_file(&path);
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let request_id = name.trim_end_matches(".request.json").to_string();
            let result = match serde_json::from_slice::<DecisionRequest>(&bytes) {
                Ok(request) => self.handle_decision(request.decision, false)?,
                Err(e) => Err(DecisionError::Unavailable(format!("malformed request: {e}"))),
            };
            write_outcome(&self.run_dir, &RequestOutcome { request_id, result })?;
        }
        Ok(())
    }

    fn check_timeouts(&mut self) -> Result<(), RunError> {
        let expired: Vec<(InstanceId, Duration)> = self
            .awaiting_since
            .iter()
            .filter_map(|(id, since)| {
                let timeout = self.spec.tasks[id.base()].hitl.as_ref()?.timeout?;
                (since.elapsed() >= timeout).then(|| (id.clone(), timeout))
            })
            .collect();
        for (id, timeout) in expired {
            close_prompt(&self.run_dir, &id)?;
            self.awaiting_since.remove(&id);
            self.fail(&id, format!("no decision within {}", format_duration(timeout)))?;
        }
        Ok(())
    }

    /// Settles instances left mid-flight by a previous coordinator.
    fn reconcile(&mut self) -> Result<(), RunError> {
        // instances created by a decision whose registration did not make it to the log
        let registered: BTreeSet<InstanceId> = self.registry.instances().map(|(id, _)| id.clone()).collect();
        for id in self.graph.creation_order().to_vec() {
            if !registered.contains(&id) {
                let anchor = self
                    .graph
                    .dependencies(&id)
                    .find(|d| self.spec.tasks[d.base()].is_checkpoint())
                    .cloned();
                let detail = match anchor {
                    Some(a) => format!("added by {a}"),
                    None => "initial".to_string(),
                };
                self.register(id, &detail)?;
            }
        }

        for id in self.graph.creation_order().to_vec() {
            let Some(state) = self.state(&id) else { continue };
            let decl = self.decl(&id);
            match state {
                TaskState::Submitted | TaskState::Running if decl.is_checkpoint() => {
                    self.open_checkpoint(&id, &decl)?;
                }
                TaskState::Submitted | TaskState::Running => {
                    let site = self.spec.site_for(&decl).clone();
                    let marker = marker_path(&status_dir(&self.run_dir, &site), &id);
                    let handle = fs::read_to_string(task_dir(&self.run_dir, &id).join(HANDLE_FILE)).ok();
                    if let Some(h) = &handle {
                        self.handles.insert(id.clone(), h.clone());
                    }
                    if marker.exists() {
                        info!("{id}: completed while the coordinator was down");
                        self.expect(&id, &site.name);
                        continue;
                    }
                    let adopted = handle.as_deref().is_some_and(|h| {
                        self.backends
                            .get_mut(&site.name)
                            .is_some_and(|b| b.adopt(&id, h))
                    });
                    if adopted {
                        info!("{id}: adopted still-running {}", handle.as_deref().unwrap_or(""));
                        self.expect(&id, &site.name);
                    } else {
                        self.fail(&id, "exit code unknown: lost across coordinator restart".into())?;
                    }
                }
                TaskState::AwaitingDecision => match read_decision(&self.run_dir, &decl, &id)? {
                    Some(decision) => {
                        info!("{id}: re-applying recorded decision");
                        if let Err(e) = self.handle_decision(decision, true)? {
                            return Err(RunError::Recovery(format!("recorded decision for {id} is invalid: {e}")));
                        }
                    }
                    None => {
                        if hitl::read_prompt(&self.run_dir, &id)?.is_none() {
                            open_checkpoint(&self.run_dir, &decl, &id)?;
                        }
                        self.awaiting_since.insert(id.clone(), Instant::now());
                    }
                },
                _ => {}
            }
        }
        Ok(())
    }

    fn all_terminal(&self) -> bool {
        self.registry.instances().all(|(_, s)| s.is_terminal())
    }

    fn run(mut self, rx: Receiver<LoopEvent>) -> Result<RunResult, RunError> {
        let outcome = self.drive(&rx);
        if let Some(mut watch) = self.watch.take() {
            watch.stop();
        }
        for backend in self.backends.values_mut() {
            backend.shutdown();
        }
        outcome?;
        // answer decisions that raced with the end of the run
        while let Ok(event) = rx.try_recv() {
            if let LoopEvent::Decision(d, reply) = event {
                let _ = reply.send(self.handle_decision(d, false)?);
            }
        }
        self.poll_inbox()?;

        let states = self.registry.snapshot();
        let wall_time = self.started.elapsed();
        let event_log = self.run_dir.join(EVENTS_FILE);
        write_json_atomic(
            &self.run_dir.join(RESULT_FILE),
            &RunSummaryFile {
                id: self.run_id.clone(),
                states: states.clone(),
                events_log: event_log.clone(),
                wall_time_secs: wall_time.as_secs_f64(),
                finished: Utc::now(),
            },
        )?;
        info!("run {} finished in {:.2?}", self.run_id, wall_time);
        Ok(RunResult {
            run_id: self.run_id,
            run_dir: self.run_dir,
            states,
            event_log,
            wall_time,
        })
    }

    fn drive(&mut self, rx: &Receiver<LoopEvent>) -> Result<(), RunError> {
        loop {
            self.schedule()?;
            if self.all_terminal() {
                return Ok(());
            }
            match rx.recv_timeout(self.tick) {
                Ok(event) => self.handle(event)?,
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(RunError::InternalInvariantViolation("event channel closed".into()))
                }
            }
            self.poll_inbox()?;
            self.check_timeouts()?;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_spec;

    fn config(dir: &Path) -> RunConfig {
        let mut c = RunConfig::new(dir);
        c.tick = Duration::from_millis(10);
        c
    }

    fn spec(text: &str) -> WorkflowSpec {
        parse_spec(&format!(
            "{text}\n[execsites.\"local\"]\npoll_interval = \"20ms\"\n"
        ))
        .unwrap()
    }

    #[test]
    fn single_task_succeeds() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec("[[task]]\nname = \"a\"\ncommand = \"true\"\n[workflow]\ntasks = [\"a\"]\n");
        let result = run_workflow(s, config(dir.path())).unwrap();
        assert!(result.all_succeeded());
        assert_eq!(result.states.len(), 1);
        assert!(result.run_dir.join(RESULT_FILE).exists());
    }

    #[test]
    fn empty_workflow_completes_immediately() {
        let dir = tempfile::tempdir().unwrap();
        let result = run_workflow(parse_spec("[workflow]\ntasks = []\n").unwrap(), config(dir.path())).unwrap();
        assert!(result.states.is_empty());
    }

    #[test]
    fn failure_cancels_only_dependents() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(
            r#"
[[task]]
name = "x"
command = "false"
[[task]]
name = "y"
command = "true"
depends_on = ["x"]
[[task]]
name = "z"
command = "true"
depends_on = ["y"]
[[task]]
name = "w"
command = "true"
[workflow]
tasks = ["x", "y", "z", "w"]
"#,
        );
        let result = run_workflow(s, config(dir.path())).unwrap();
        let st = |n: &str| result.states[&InstanceId::first(n)];
        assert_eq!(st("x"), TaskState::Failed);
        assert_eq!(st("y"), TaskState::Cancelled);
        assert_eq!(st("z"), TaskState::Cancelled);
        assert_eq!(st("w"), TaskState::Succeeded);
    }

    #[test]
    fn missing_output_fails_with_exit_zero() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec("[[task]]\nname = \"a\"\ncommand = \"true\"\noutput.results = \"results.json\"\n[workflow]\ntasks = [\"a\"]\n");
        let result = run_workflow(s, config(dir.path())).unwrap();
        assert_eq!(result.states[&InstanceId::first("a")], TaskState::Failed);
        let events = crate::registry::read_events(&result.event_log).unwrap();
        assert!(events.last().unwrap().detail.contains("results"));
    }

    #[test]
    fn checkpoint_waits_and_decision_adds_generation() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(
            r#"
[[task]]
name = "c"
command = "modules.review"
add_tasks = ["t"]
hitl.enabled = true
hitl.message = "ok?"
[[task]]
name = "t"
command = "true"
[workflow]
tasks = ["c"]
"#,
        );
        let handle = Orchestrator::start(s, config(dir.path())).unwrap();
        let c = InstanceId::first("c");
        let start = Instant::now();
        while hitl::list_prompts(&handle.run_dir).unwrap().is_empty() {
            assert!(start.elapsed() < Duration::from_secs(10));
            thread::sleep(Duration::from_millis(10));
        }
        let mut bad = Decision::new(c.clone(), Verdict::Reject);
        bad.add_tasks = vec!["c".into()];
        assert_eq!(handle.decide(bad).unwrap_err().code(), "NotPermitted");

        let mut d = Decision::new(c.clone(), Verdict::Reject);
        d.add_tasks = vec!["t".into()];
        let outcome = handle.decide(d.clone()).unwrap();
        assert_eq!(outcome.added, vec![InstanceId::first("t")]);
        assert_eq!(outcome.state, TaskState::Succeeded);
        assert_eq!(handle.decide(d).unwrap_err().code(), "DuplicateDecision");
        let result = handle.wait().unwrap();
        assert_eq!(result.states.len(), 2);
        assert!(result.all_succeeded());
    }

    #[test]
    fn timeout_escalates_to_failed() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(
            "[[task]]\nname = \"c\"\ncommand = \"modules.review\"\nhitl.enabled = true\nhitl.message = \"?\"\nhitl.timeout = \"100ms\"\n[workflow]\ntasks = [\"c\"]\n",
        );
        let result = run_workflow(s, config(dir.path())).unwrap();
        assert_eq!(result.states[&InstanceId::first("c")], TaskState::Failed);
        assert!(hitl::list_prompts(&result.run_dir).unwrap().is_empty());
    }
}
