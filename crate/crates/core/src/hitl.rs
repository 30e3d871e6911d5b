//! Checkpoint prompts and supervisor decisions.
//!
//! A checkpoint instance publishes a prompt file under `prompts/` while it
//! awaits a decision. The decision is written once, as JSON, to
//! `decisions/<name>#<k>/<decision_output>`; that file is the only input
//! needed to reproduce its effects, which lets a restarted coordinator
//! re-apply decisions it had not finished processing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{TaskDecl, WorkflowSpec, DEFAULT_DECISION_FILE};
use crate::exec_local::{resolve_path, InstanceParams};
use crate::fsutil::write_json_atomic;
use crate::ids::InstanceId;
use crate::registry::TaskState;

pub const PROMPTS_DIR: &str = "prompts";
pub const DECISIONS_DIR: &str = "decisions";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Approve,
    Reject,
    /// Fails the checkpoint and cancels its branch.
    Abort,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Approve => "approve",
            Verdict::Reject => "reject",
            Verdict::Abort => "abort",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "approve" => Ok(Verdict::Approve),
            "reject" => Ok(Verdict::Reject),
            "abort" => Ok(Verdict::Abort),
            other => Err(format!("unknown verdict `{other}` (expected approve, reject or abort)")),
        }
    }
}

/// Task name → parameter key → value. Keys are `input.<label>`,
/// `output.<label>`, or a bare label naming an existing input or output.
pub type ParamOverrides = BTreeMap<String, BTreeMap<String, serde_json::Value>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub instance: InstanceId,
    pub verdict: Verdict,
    #[serde(default)]
    pub add_tasks: Vec<String>,
    #[serde(default)]
    pub param_overrides: ParamOverrides,
    /// Pending instances the decision cancels as no longer needed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skip: Vec<InstanceId>,
    #[serde(default)]
    pub message: String,
    #[serde(default)]
    pub actor: String,
    #[serde(default = "Utc::now")]
    pub timestamp: DateTime<Utc>,
}

impl Decision {
    pub fn new(instance: InstanceId, verdict: Verdict) -> Self {
        Self {
            instance,
            verdict,
            add_tasks: Vec::new(),
            param_overrides: ParamOverrides::new(),
            skip: Vec::new(),
            message: String::new(),
            actor: String::new(),
            timestamp: Utc::now(),
        }
    }

    /// One-line summary used as the event detail.
    pub fn summary(&self) -> String {
        let mut s = format!("decision {}", self.verdict);
        if !self.actor.is_empty() {
            s.push_str(&format!(" by {}", self.actor));
        }
        if !self.add_tasks.is_empty() {
            s.push_str(&format!("; add {}", self.add_tasks.join(",")));
        }
        if !self.skip.is_empty() {
            let names: Vec<String> = self.skip.iter().map(ToString::to_string).collect();
            s.push_str(&format!("; skip {}", names.join(",")));
        }
        if !self.message.is_empty() {
            s.push_str(&format!(": {}", self.message.trim()));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingPrompt {
    pub instance: InstanceId,
    pub message: String,
    /// Artifact shown to the supervisor, as declared.
    pub input_artifact: Option<String>,
    pub created_at: DateTime<Utc>,
    /// Tasks the decision may activate.
    pub add_tasks: Vec<String>,
}

/// What a decision did.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub instance: InstanceId,
    pub verdict: Verdict,
    pub state: TaskState,
    pub added: Vec<InstanceId>,
    pub skipped: Vec<InstanceId>,
    pub decision_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail")]
pub enum DecisionError {
    #[error("unknown instance {0}")]
    UnknownInstance(String),
    #[error("{instance} is {state}, not AwaitingDecision")]
    NotAwaiting { instance: String, state: String },
    #[error("{checkpoint} does not permit adding: {}", names.join(", "))]
    NotPermitted { checkpoint: String, names: Vec<String> },
    #[error("a decision for {0} was already recorded")]
    DuplicateDecision(String),
    #[error("unknown override target: {0}")]
    UnknownOverrideTarget(String),
    #[error("cannot skip {0}: {1}")]
    InvalidSkip(String, String),
    #[error("decision channel unavailable: {0}")]
    Unavailable(String),
}

impl DecisionError {
    pub fn code(&self) -> &'static str {
        match self {
            DecisionError::UnknownInstance(_) => "UnknownInstance",
            DecisionError::NotAwaiting { .. } => "NotAwaiting",
            DecisionError::NotPermitted { .. } => "NotPermitted",
            DecisionError::DuplicateDecision(_) => "DuplicateDecision",
            DecisionError::UnknownOverrideTarget(_) => "UnknownOverrideTarget",
            DecisionError::InvalidSkip(..) => "InvalidSkip",
            DecisionError::Unavailable(_) => "Unavailable",
        }
    }
}

pub fn prompt_path(run_dir: &Path, instance: &InstanceId) -> PathBuf {
    run_dir.join(PROMPTS_DIR).join(format!("{}.json", instance.file_stem()))
}

/// Publishes the prompt for a checkpoint instance.
pub fn open_checkpoint(run_dir: &Path, decl: &TaskDecl, instance: &InstanceId) -> io::Result<PendingPrompt> {
    let hitl = decl.hitl.as_ref();
    let prompt = PendingPrompt {
        instance: instance.clone(),
        message: hitl.map(|h| h.message.clone()).unwrap_or_default(),
        input_artifact: hitl.and_then(|h| h.input.clone()),
        created_at: Utc::now(),
        add_tasks: decl.add_tasks.clone(),
    };
    write_json_atomic(&prompt_path(run_dir, instance), &prompt)?;
    Ok(prompt)
}

pub fn close_prompt(run_dir: &Path, instance: &InstanceId) -> io::Result<()> {
    match fs::remove_file(prompt_path(run_dir, instance)) {
        Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}

pub fn read_prompt(run_dir: &Path, instance: &InstanceId) -> io::Result<Option<PendingPrompt>> {
    match fs::read(prompt_path(run_dir, instance)) {
        Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(io::Error::other),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

/// Open prompts, ordered by creation time then instance.
pub fn list_prompts(run_dir: &Path) -> io::Result<Vec<PendingPrompt>> {
    let dir = run_dir.join(PROMPTS_DIR);
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut prompts = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            // a prompt may be closed between listing and reading
            if let Ok(bytes) = fs::read(&path) {
                if let Ok(p) = serde_json::from_slice::<PendingPrompt>(&bytes) {
                    prompts.push(p);
                }
            }
        }
    }
    prompts.sort_by(|a, b| (a.created_at, &a.instance).cmp(&(b.created_at, &b.instance)));
    Ok(prompts)
}

/// Where the decision for `instance` is recorded inside the run directory.
/// A relative `decision_output` is placed under `decisions/<name>#<k>/`, so
/// every generation keeps its own record.
pub fn decision_path(run_dir: &Path, decl: &TaskDecl, instance: &InstanceId) -> PathBuf {
    let output = decl
        .hitl
        .as_ref()
        .map(|h| h.decision_output.as_str())
        .unwrap_or(DEFAULT_DECISION_FILE);
    let dir = run_dir.join(DECISIONS_DIR).join(instance.file_stem());
    if Path::new(output).is_absolute() {
        dir.join(DEFAULT_DECISION_FILE)
    } else {
        dir.join(output)
    }
}

/// Writes the decision record. An absolute `decision_output` additionally
/// receives a copy at that path.
pub fn record_decision(run_dir: &Path, decl: &TaskDecl, decision: &Decision) -> io::Result<PathBuf> {
    let path = decision_path(run_dir, decl, &decision.instance);
    write_json_atomic(&path, decision)?;
    if let Some(h) = &decl.hitl {
        if Path::new(&h.decision_output).is_absolute() {
            write_json_atomic(Path::new(&h.decision_output), decision)?;
        }
    }
    Ok(path)
}

pub fn read_decision(run_dir: &Path, decl: &TaskDecl, instance: &InstanceId) -> io::Result<Option<Decision>> {
    match fs::read(decision_path(run_dir, decl, instance)) {
        Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(io::Error::other),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

/// Absolute path of a prompt's artifact.
pub fn artifact_path(run_dir: &Path, prompt: &PendingPrompt) -> Option<PathBuf> {
    prompt.input_artifact.as_deref().map(|p| resolve_path(run_dir, p))
}

/// Checks that the decision's add_tasks are permitted by the checkpoint.
pub fn check_permitted(decl: &TaskDecl, decision: &Decision) -> Result<(), DecisionError> {
    let names: Vec<String> = decision
        .add_tasks
        .iter()
        .filter(|n| !decl.permits_addition(n))
        .cloned()
        .collect();
    if names.is_empty() {
        Ok(())
    } else {
        Err(DecisionError::NotPermitted {
            checkpoint: decision.instance.to_string(),
            names,
        })
    }
}

enum Slot {
    Input(String),
    Output(String),
}

fn resolve_key(decl: &TaskDecl, key: &str) -> Option<Slot> {
    if let Some(label) = key.strip_prefix("input.") {
        return decl.inputs.contains_key(label).then(|| Slot::Input(label.to_string()));
    }
    if let Some(label) = key.strip_prefix("output.") {
        return decl.outputs.contains_key(label).then(|| Slot::Output(label.to_string()));
    }
    if decl.inputs.contains_key(key) {
        Some(Slot::Input(key.to_string()))
    } else if decl.outputs.contains_key(key) {
        Some(Slot::Output(key.to_string()))
    } else {
        None
    }
}

fn value_text(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Effective parameters of newly added instances. Every override must name
/// a task being added and an existing input or output label of that task.
/// The spec is never modified.
pub fn apply_overrides(
    spec: &WorkflowSpec,
    added: &[InstanceId],
    overrides: &ParamOverrides,
) -> Result<BTreeMap<InstanceId, InstanceParams>, DecisionError> {
    let added_names: BTreeSet<&str> = added.iter().map(InstanceId::base).collect();
    for (task, keys) in overrides {
        let decl = spec
            .task(task)
            .filter(|_| added_names.contains(task.as_str()))
            .ok_or_else(|| DecisionError::UnknownOverrideTarget(format!("{task} is not being added")))?;
        for key in keys.keys() {
            if resolve_key(decl, key).is_none() {
                return Err(DecisionError::UnknownOverrideTarget(format!("{task}.{key}")));
            }
        }
    }
    let mut out = BTreeMap::new();
    for id in added {
        let decl = spec
            .task(id.base())
            .ok_or_else(|| DecisionError::UnknownOverrideTarget(id.base().to_string()))?;
        let mut params = InstanceParams::from_decl(decl);
        for (key, value) in overrides.get(id.base()).into_iter().flatten() {
            match resolve_key(decl, key) {
                Some(Slot::Input(label)) => params.inputs.insert(label, value_text(value)),
                Some(Slot::Output(label)) => params.outputs.insert(label, value_text(value)),
                None => unreachable!("override keys were checked above"),
            };
        }
        out.insert(id.clone(), params);
    }
    Ok(out)
}

/// Validates overrides against the task names a decision adds, before any
/// instance exists.
pub fn check_overrides(spec: &WorkflowSpec, add_tasks: &[String], overrides: &ParamOverrides) -> Result<(), DecisionError> {
    let probe: Vec<InstanceId> = add_tasks
        .iter()
        .filter(|n| spec.task(n).is_some())
        .map(|n| InstanceId::first(n.clone()))
        .collect();
    apply_overrides(spec, &probe, overrides).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_spec;

    const SPEC: &str = r#"
[[task]]
name = "review"
command = "modules.review"
add_tasks = ["inference_task"]
hitl.enabled = true
hitl.input = "metrics.txt"
hitl.message = "Is the model good enough?\n"

[[task]]
name = "inference_task"
command = "true"
input.model = "model.pt"
output.results = "results.json"

[workflow]
tasks = ["review"]
"#;

    fn spec() -> WorkflowSpec {
        parse_spec(SPEC).unwrap()
    }

    #[test]
    fn prompt_lifecycle() {
        let dir = tempfile::tempdir().unwrap();
        let spec = spec();
        let id = InstanceId::first("review");
        let prompt = open_checkpoint(dir.path(), &spec.tasks["review"], &id).unwrap();
        assert_eq!(prompt.message, "Is the model good enough?\n");
        assert_eq!(prompt.input_artifact.as_deref(), Some("metrics.txt"));
        assert_eq!(list_prompts(dir.path()).unwrap(), vec![prompt.clone()]);
        assert_eq!(artifact_path(dir.path(), &prompt), Some(dir.path().join("metrics.txt")));
        close_prompt(dir.path(), &id).unwrap();
        close_prompt(dir.path(), &id).unwrap();
        assert!(list_prompts(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn decision_roundtrip_per_generation() {
        let dir = tempfile::tempdir().unwrap();
        let spec = spec();
        let decl = &spec.tasks["review"];
        let mut d = Decision::new(InstanceId::new("review", 2), Verdict::Reject);
        d.add_tasks = vec!["inference_task".into()];
        d.actor = "alice".into();
        let path = record_decision(dir.path(), decl, &d).unwrap();
        assert_eq!(path, dir.path().join("decisions/review#2/hitl_decision.json"));
        assert_eq!(read_decision(dir.path(), decl, &d.instance).unwrap(), Some(d));
        assert_eq!(read_decision(dir.path(), decl, &InstanceId::first("review")).unwrap(), None);
    }

    #[test]
    fn decision_json_uses_documented_fields() {
        let d = Decision::new(InstanceId::first("review"), Verdict::Approve);
        let v = serde_json::to_value(&d).unwrap();
        for key in ["instance", "verdict", "add_tasks", "param_overrides", "message", "actor", "timestamp"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["verdict"], "approve");
        assert_eq!(v["instance"], "review#1");
        let minimal: Decision = serde_json::from_str(r#"{"instance":"review#1","verdict":"reject"}"#).unwrap();
        assert!(minimal.add_tasks.is_empty());
    }

    #[test]
    fn permission_check() {
        let spec = spec();
        let mut d = Decision::new(InstanceId::first("review"), Verdict::Reject);
        d.add_tasks = vec!["inference_task".into()];
        assert!(check_permitted(&spec.tasks["review"], &d).is_ok());
        d.add_tasks.push("review".into());
        let err = check_permitted(&spec.tasks["review"], &d).unwrap_err();
        assert_eq!(err.code(), "NotPermitted");
    }

    #[test]
    fn overrides_bind_new_paths() {
        let spec = spec();
        let added = vec![InstanceId::new("inference_task", 2)];
        let mut overrides = ParamOverrides::new();
        overrides
            .entry("inference_task".into())
            .or_default()
            .insert("input.model".into(), "models/v2.pt".into());
        let params = apply_overrides(&spec, &added, &overrides).unwrap();
        assert_eq!(params[&added[0]].inputs["model"], "models/v2.pt");
        assert_eq!(params[&added[0]].outputs["results"], "results.json");
        // the declaration is untouched
        assert_eq!(spec.tasks["inference_task"].inputs["model"], "model.pt");
    }

    #[test]
    fn empty_overrides_are_identity() {
        let spec = spec();
        let added = vec![InstanceId::first("inference_task")];
        let params = apply_overrides(&spec, &added, &ParamOverrides::new()).unwrap();
        assert_eq!(params[&added[0]], InstanceParams::from_decl(&spec.tasks["inference_task"]));
    }

    #[test]
    fn override_targets_are_checked() {
        let spec = spec();
        let mut overrides = ParamOverrides::new();
        overrides
            .entry("review".into())
            .or_default()
            .insert("input.model".into(), "x".into());
        let err = check_overrides(&spec, &["inference_task".into()], &overrides).unwrap_err();
        assert_eq!(err.code(), "UnknownOverrideTarget");

        let mut overrides = ParamOverrides::new();
        overrides
            .entry("inference_task".into())
            .or_default()
            .insert("input.nope".into(), "x".into());
        assert!(check_overrides(&spec, &["inference_task".into()], &overrides).is_err());
        assert!(check_overrides(&spec, &[], &ParamOverrides::new()).is_ok());
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!("abort".parse::<Verdict>(), Ok(Verdict::Abort));
        assert!("maybe".parse::<Verdict>().is_err());
    }
}
