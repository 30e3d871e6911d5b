//! Local task execution and the launch-plan / marker protocol shared by all
//! backends.
//!
//! A finished task leaves two files in its site's status directory:
//! `<name>#<k>.exit` holding the exit code, then the empty `<name>#<k>.done`
//! marker. The marker is created strictly after the exit file, so a reader
//! that sees the marker can always read the code.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ExecBackend, Submission};
use crate::config::{ExecSiteDecl, TaskCommand, TaskDecl};
use crate::fsutil::{touch, write_atomic};
use crate::ids::InstanceId;
use crate::modules::{ModuleContext, ModuleRegistry};

pub const TASKS_DIR: &str = "tasks";
pub const PID_FILE: &str = "pid";

/// Input and output paths an instance runs with: the declaration's, possibly
/// overridden by a decision.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceParams {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl InstanceParams {
    pub fn from_decl(decl: &TaskDecl) -> Self {
        Self {
            inputs: decl.inputs.clone(),
            outputs: decl.outputs.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlannedCommand {
    /// Handed to `sh -c`.
    Shell(String),
    Module(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchPlan {
    pub instance: InstanceId,
    pub command: PlannedCommand,
    pub working_dir: PathBuf,
    pub env: BTreeMap<String, String>,
    pub marker_path: PathBuf,
    pub exit_path: PathBuf,
    pub stdout_path: PathBuf,
    pub stderr_path: PathBuf,
    /// Declared outputs resolved to local paths (URIs omitted).
    pub outputs: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("declared input `{label}` does not exist: {path}")]
    MissingInput { label: String, path: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("declared outputs missing: {}", .0.join(", "))]
pub struct MissingOutput(pub Vec<String>);

fn is_uri(path: &str) -> bool {
    path.contains("://")
}

/// Relative paths are taken relative to the run directory.
pub fn resolve_path(run_dir: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        run_dir.join(p)
    }
}

pub fn status_dir(run_dir: &Path, site: &ExecSiteDecl) -> PathBuf {
    resolve_path(run_dir, &site.status_dir)
}

pub fn marker_path(status_dir: &Path, instance: &InstanceId) -> PathBuf {
    status_dir.join(format!("{}.done", instance.file_stem()))
}

pub fn exit_path(status_dir: &Path, instance: &InstanceId) -> PathBuf {
    status_dir.join(format!("{}.exit", instance.file_stem()))
}

pub fn task_dir(run_dir: &Path, instance: &InstanceId) -> PathBuf {
    run_dir.join(TASKS_DIR).join(instance.file_stem())
}

fn env_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect()
}

/// Single-quotes `s` for a POSIX shell.
pub fn shell_quote(s: &str) -> String {
    if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "/._-:=,+@%".contains(c)) {
        return s.to_string();
    }
    format!("'{}'", s.replace('\'', "'\\''"))
}

/// Wraps `command` in a container invocation with the given host paths bind-mounted.
pub fn container_command(runtime: &str, image: &str, binds: &[PathBuf], command: &str) -> String {
    let docker_like = matches!(
        runtime.split_whitespace().next(),
        Some("docker" | "podman" | "nerdctl")
    );
    let mut parts = vec![runtime.to_string()];
    if docker_like {
        for b in binds {
            let p = b.display().to_string();
            parts.push(format!("-v {}", shell_quote(&format!("{p}:{p}"))));
        }
    } else if !binds.is_empty() {
        let list: Vec<String> = binds.iter().map(|b| b.display().to_string()).collect();
        parts.push(format!("--bind {}", shell_quote(&list.join(","))));
    }
    parts.push(shell_quote(image));
    parts.push(command.to_string());
    parts.join(" ")
}

/// Builds the launch plan for one instance on `site`.
///
/// Without a container the declared command is used verbatim. With one, the
/// command runs inside `<container_runtime> <binds> <image>`, binding every
/// local input path and the parent directory of every local output path.
/// Inputs and outputs are also exported as `FLOWGATE_INPUT_<LABEL>` and
/// `FLOWGATE_OUTPUT_<LABEL>`.
pub fn build_plan(
    decl: &TaskDecl,
    params: &InstanceParams,
    instance: &InstanceId,
    site: &ExecSiteDecl,
    run_dir: &Path,
    check_inputs: bool,
) -> Result<LaunchPlan, PlanError> {
    let status = status_dir(run_dir, site);
    let working_dir = task_dir(run_dir, instance);

    let mut env = BTreeMap::new();
    env.insert("FLOWGATE_INSTANCE".to_string(), instance.to_string());
    env.insert("FLOWGATE_RUN_DIR".to_string(), run_dir.display().to_string());
    env.insert("FLOWGATE_TASK_DIR".to_string(), working_dir.display().to_string());

    let mut binds = Vec::new();
    for (label, path) in &params.inputs {
        let value = if is_uri(path) {
            path.clone()
        } else {
            let resolved = resolve_path(run_dir, path);
            if check_inputs && !resolved.exists() {
                return Err(PlanError::MissingInput {
                    label: label.clone(),
                    path: resolved.display().to_string(),
                });
            }
            binds.push(resolved.clone());
            resolved.display().to_string()
        };
        env.insert(format!("FLOWGATE_INPUT_{}", env_label(label)), value);
    }
    let mut outputs = BTreeMap::new();
    for (label, path) in &params.outputs {
        let value = if is_uri(path) {
            path.clone()
        } else {
            let resolved = resolve_path(run_dir, path);
            if let Some(parent) = resolved.parent() {
                binds.push(parent.to_path_buf());
            }
            outputs.insert(label.clone(), resolved.clone());
            resolved.display().to_string()
        };
        env.insert(format!("FLOWGATE_OUTPUT_{}", env_label(label)), value);
    }
    binds.sort();
    binds.dedup();

    let command = match (&decl.command, &decl.container) {
        (TaskCommand::Shell(cmd), Some(image)) => {
            PlannedCommand::Shell(container_command(&site.container_runtime, image, &binds, cmd))
        }
        (TaskCommand::Shell(cmd), None) => PlannedCommand::Shell(cmd.clone()),
        (TaskCommand::Module(name), _) => PlannedCommand::Module(name.clone()),
    };

    Ok(LaunchPlan {
        instance: instance.clone(),
        command,
        stdout_path: working_dir.join("stdout.log"),
        stderr_path: working_dir.join("stderr.log"),
        working_dir,
        env,
        marker_path: marker_path(&status, instance),
        exit_path: exit_path(&status, instance),
        outputs,
    })
}

/// Checks that every declared local output exists.
pub fn verify_outputs(params: &InstanceParams, run_dir: &Path) -> Result<(), MissingOutput> {
    let missing: Vec<String> = params
        .outputs
        .iter()
        .filter(|(_, path)| !is_uri(path) && !resolve_path(run_dir, path).exists())
        .map(|(label, _)| label.clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(MissingOutput(missing))
    }
}

/// Writes the exit file, then the marker.
pub fn write_completion(plan: &LaunchPlan, code: i32) -> io::Result<()> {
    write_atomic(&plan.exit_path, code.to_string().as_bytes())?;
    touch(&plan.marker_path)
}

fn prepare_dirs(plan: &LaunchPlan) -> io::Result<()> {
    fs::create_dir_all(&plan.working_dir)?;
    if let Some(status) = plan.marker_path.parent() {
        fs::create_dir_all(status)?;
    }
    for path in plan.outputs.values() {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// Runs the shell command then records exit code and marker itself, so the
/// completion protocol holds even if the coordinator dies mid-task.
const WRAPPER: &str = r#"sh -c "$1" >"$2" 2>"$3"; code=$?; printf '%s' "$code" >"$4.tmp" && mv "$4.tmp" "$4" && : >"$5""#;

/// Spawns `command` in its own process group.
pub(crate) fn spawn_shell(plan: &LaunchPlan, command: &str, self_reporting: bool) -> io::Result<Child> {
    prepare_dirs(plan)?;
    let mut cmd = Command::new("sh");
    if self_reporting {
        cmd.arg("-c")
            .arg(WRAPPER)
            .arg("flowgate-task")
            .arg(command)
            .arg(&plan.stdout_path)
            .arg(&plan.stderr_path)
            .arg(&plan.exit_path)
            .arg(&plan.marker_path)
            .stdout(Stdio::null())
            .stderr(Stdio::null());
    } else {
        cmd.arg("-c")
            .arg(command)
            .stdout(File::create(&plan.stdout_path)?)
            .stderr(File::create(&plan.stderr_path)?);
    }
    cmd.current_dir(&plan.working_dir)
        .envs(&plan.env)
        .stdin(Stdio::null())
        .process_group(0);
    cmd.spawn()
}

/// Kills the whole process group led by `pid`.
pub(crate) fn kill_group(pid: u32) -> io::Result<()> {
    let rc = unsafe { libc::killpg(pid as libc::pid_t, libc::SIGKILL) };
    if rc == 0 {
        Ok(())
    } else {
        let err = io::Error::last_os_error();
        if err.raw_os_error() == Some(libc::ESRCH) {
            Ok(())
        } else {
            Err(err)
        }
    }
}

pub fn process_alive(pid: u32) -> bool {
    unsafe { libc::kill(pid as libc::pid_t, 0) == 0 }
}

/// Runs a module handler on its own thread, reporting through the marker
/// protocol unless cancelled first.
pub(crate) fn spawn_module(
    plan: &LaunchPlan,
    modules: &ModuleRegistry,
    cancelled: Arc<AtomicBool>,
    report: bool,
) -> Result<thread::JoinHandle<i32>, BackendError> {
    let PlannedCommand::Module(name) = &plan.command else {
        unreachable!("spawn_module called for a shell command");
    };
    let handler = modules
        .get(name)
        .ok_or_else(|| BackendError::UnknownModule(name.clone()))?;
    prepare_dirs(plan)?;
    let plan = plan.clone();
    Ok(thread::spawn(move || {
        let code = handler.run(&ModuleContext {
            instance: &plan.instance,
            working_dir: &plan.working_dir,
            env: &plan.env,
            outputs: &plan.outputs,
        });
        if report && !cancelled.load(Ordering::SeqCst) {
            if let Err(e) = write_completion(&plan, code) {
                warn!("{}: failed to write completion files: {e}", plan.instance);
            }
        }
        code
    }))
}

enum LocalJob {
    Process { pid: u32 },
    Module { cancelled: Arc<AtomicBool> },
}

/// Runs tasks as child processes on this machine.
pub struct LocalExecutor {
    modules: Arc<ModuleRegistry>,
    jobs: HashMap<InstanceId, LocalJob>,
}

impl LocalExecutor {
    pub fn new(modules: Arc<ModuleRegistry>) -> Self {
        Self {
            modules,
            jobs: HashMap::new(),
        }
    }

    /// Starts the plan; the returned handle is the child's pid (or the module name).
    pub fn launch(&mut self, plan: &LaunchPlan) -> Result<Submission, BackendError> {
        match &plan.command {
            PlannedCommand::Shell(command) => {
                let mut child =
                    spawn_shell(plan, command, true).map_err(|e| BackendError::Spawn(e.to_string()))?;
                let pid = child.id();
                if let Err(e) = fs::write(plan.working_dir.join(PID_FILE), pid.to_string()) {
                    warn!("{}: cannot record pid: {e}", plan.instance);
                }
                let instance = plan.instance.clone();
                thread::spawn(move || match child.wait() {
                    Ok(status) => debug!("{instance}: wrapper exited with {status}"),
                    Err(e) => warn!("{instance}: wait failed: {e}"),
                });
                self.jobs.insert(plan.instance.clone(), LocalJob::Process { pid });
                Ok(Submission {
                    handle: format!("pid {pid}"),
                    started: true,
                })
            }
            PlannedCommand::Module(name) => {
                let cancelled = Arc::new(AtomicBool::new(false));
                spawn_module(plan, &self.modules, cancelled.clone(), true)?;
                self.jobs
                    .insert(plan.instance.clone(), LocalJob::Module { cancelled });
                Ok(Submission {
                    handle: format!("module {name}"),
                    started: true,
                })
            }
        }
    }
}

impl ExecBackend for LocalExecutor {
    fn strategy(&self) -> &str {
        "local"
    }

    fn submit(&mut self, plan: &LaunchPlan) -> Result<Submission, BackendError> {
        self.launch(plan)
    }

    fn cancel(&mut self, instance: &InstanceId) -> Result<(), BackendError> {
        match self.jobs.remove(instance) {
            Some(LocalJob::Process { pid }) => kill_group(pid).map_err(BackendError::Io),
            Some(LocalJob::Module { cancelled }) => {
                cancelled.store(true, Ordering::SeqCst);
                Ok(())
            }
            None => Err(BackendError::UnknownJob(instance.clone())),
        }
    }

    fn adopt(&mut self, instance: &InstanceId, handle: &str) -> bool {
        match handle.strip_prefix("pid ").and_then(|p| p.parse::<u32>().ok()) {
            Some(pid) if process_alive(pid) => {
                self.jobs.insert(instance.clone(), LocalJob::Process { pid });
                true
            }
            _ => false,
        }
    }

    fn describe(&self, instance: &InstanceId) -> Option<String> {
        self.jobs.get(instance).map(|job| match job {
            LocalJob::Process { pid } => format!("pid {pid}"),
            LocalJob::Module { .. } => "module".to_string(),
        })
    }

    fn shutdown(&mut self) {
        for (instance, job) in self.jobs.drain() {
            if let LocalJob::Process { pid } = job {
                if process_alive(pid) {
                    debug!("{instance}: leaving pid {pid} running at shutdown");
                }
            }
        }
    }
}
