//! The TOML workflow dialect.
//!
//! A workflow file declares tasks as a `[[task]]` array of tables, execution
//! sites as `[execsites."NAME"]` tables and the initially active task list under
//! `[workflow] tasks`. Parsing fills every default and resolves every
//! cross-reference; [`validate_acyclic`] checks the declared dependency graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;
use toml::{Table, Value};

/// Name of the execsite that is always available, even when undeclared.
pub const LOCAL_SITE: &str = "local";
pub const DEFAULT_DECISION_FILE: &str = "hitl_decision.json";
pub const DEFAULT_CONTAINER_RUNTIME: &str = "singularity run --nv";
/// Commands with this prefix name an internal handler rather than a shell line.
pub const MODULE_PREFIX: &str = "modules.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum TaskCommand {
    Shell(String),
    Module(String),
}

impl TaskCommand {
    pub fn from_text(text: &str) -> Self {
        if text.starts_with(MODULE_PREFIX) {
            TaskCommand::Module(text.to_string())
        } else {
            TaskCommand::Shell(text.to_string())
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            TaskCommand::Shell(s) | TaskCommand::Module(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HitlSpec {
    pub enabled: bool,
    /// Artifact shown to the supervisor.
    pub input: Option<String>,
    pub message: String,
    /// Resolved relative to the checkpoint instance's decision directory.
    pub decision_output: String,
    /// Escalates the checkpoint to Failed when no decision arrives in time.
    pub timeout: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskDecl {
    pub name: String,
    pub command: TaskCommand,
    pub execsite: String,
    pub depends_on: Vec<String>,
    pub add_tasks: Vec<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub hitl: Option<HitlSpec>,
    pub container: Option<String>,
}

impl TaskDecl {
    pub fn is_checkpoint(&self) -> bool {
        self.hitl.as_ref().is_some_and(|h| h.enabled)
    }

    pub fn permits_addition(&self, name: &str) -> bool {
        self.add_tasks.iter().any(|t| t == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Local,
    BatchSim,
    RemoteBatch,
}

impl SiteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::Local => "local",
            SiteKind::BatchSim => "batch_sim",
            SiteKind::RemoteBatch => "remote_batch",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "local" => Some(SiteKind::Local),
            "batch_sim" => Some(SiteKind::BatchSim),
            "remote_batch" => Some(SiteKind::RemoteBatch),
            _ => None,
        }
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Distribution for simulated durations (queue delay, run time).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum DelayModel {
    Fixed { delay: Duration },
    Uniform { min: Duration, max: Duration },
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel::Fixed {
            delay: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BatchSettings {
    pub seed: u64,
    pub queue_delay: DelayModel,
    /// Minimum simulated time a job spends running, on top of its command.
    pub run_time: DelayModel,
    pub max_concurrent_running: usize,
    /// Maximum number of queued plus running jobs; `None` is unlimited.
    pub capacity: Option<usize>,
    /// Kill running jobs after this long.
    pub run_cap: Option<Duration>,
    pub tick: Duration,
}

impl Default for BatchSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            queue_delay: DelayModel::default(),
            run_time: DelayModel::default(),
            max_concurrent_running: 2,
            capacity: None,
            run_cap: None,
            tick: Duration::from_millis(50),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecSiteDecl {
    pub name: String,
    pub kind: SiteKind,
    pub host: Option<String>,
    pub key: Option<String>,
    pub user: Option<String>,
    /// Where completion markers appear; relative paths are under the run directory.
    pub status_dir: String,
    pub poll_interval: Duration,
    pub container_runtime: String,
    /// Backend strategy override; defaults to the one registered for `kind`.
    pub backend: Option<String>,
    pub batch: BatchSettings,
}

impl ExecSiteDecl {
    pub fn implicit_local() -> Self {
        Self::with_defaults(LOCAL_SITE, SiteKind::Local)
    }

    pub fn with_defaults(name: &str, kind: SiteKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            host: None,
            key: None,
            user: None,
            status_dir: format!("status/{name}"),
            poll_interval: Duration::from_secs(1),
            container_runtime: DEFAULT_CONTAINER_RUNTIME.to_string(),
            backend: None,
            batch: BatchSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorkflowSpec {
    pub tasks: BTreeMap<String, TaskDecl>,
    pub initial_active: Vec<String>,
    pub execsites: BTreeMap<String, ExecSiteDecl>,
}

impl WorkflowSpec {
    pub fn task(&self, name: &str) -> Option<&TaskDecl> {
        self.tasks.get(name)
    }

    pub fn site(&self, name: &str) -> Option<&ExecSiteDecl> {
        self.execsites.get(name)
    }

    pub fn site_for(&self, decl: &TaskDecl) -> &ExecSiteDecl {
        self.execsites
            .get(&decl.execsite)
            .expect("execsite references are resolved at parse time")
    }
}

/// Where in the document a diagnostic points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Location {
    pub table: String,
    pub key: Option<String>,
}

impl Location {
    fn table(table: impl Into<String>) -> Self {
        Self {
            table: table.into(),
            key: None,
        }
    }

    fn key(table: impl Into<String>, key: impl Into<String>) -> Self {
        Self {
            table: table.into(),
            key: Some(key.into()),
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(key) => write!(f, "{}.{}", self.table, key),
            None => f.write_str(&self.table),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("syntax error: {message}")]
    Syntax { message: String },
    #[error("{location}: unknown task `{name}`")]
    UnknownTask { location: Location, name: String },
    #[error("{location}: unknown execsite `{name}`")]
    UnknownExecsite { location: Location, name: String },
    #[error("{location}: missing required field `{field}`")]
    MissingField { location: Location, field: String },
    #[error("{location}: task `{name}` is declared more than once")]
    DuplicateTask { location: Location, name: String },
    #[error("{location}: {message}")]
    InvalidValue { location: Location, message: String },
    #[error("dependency cycle: {}", path.join(" -> "))]
    Cycle { path: Vec<String> },
}

impl SpecError {
    /// Stable machine-readable name of the diagnostic.
    pub fn code(&self) -> &'static str {
        match self {
            SpecError::Syntax { .. } => "SyntaxError",
            SpecError::UnknownTask { .. } => "UnknownTask",
            SpecError::UnknownExecsite { .. } => "UnknownExecsite",
            SpecError::MissingField { .. } => "MissingField",
            SpecError::DuplicateTask { .. } => "DuplicateTask",
            SpecError::InvalidValue { .. } => "InvalidValue",
            SpecError::Cycle { .. } => "CycleError",
        }
    }

    pub fn location(&self) -> Option<&Location> {
        match self {
            SpecError::UnknownTask { location, .. }
            | SpecError::UnknownExecsite { location, .. }
            | SpecError::MissingField { location, .. }
            | SpecError::DuplicateTask { location, .. }
            | SpecError::InvalidValue { location, .. } => Some(location),
            SpecError::Syntax { .. } | SpecError::Cycle { .. } => None,
        }
    }
}

/// Non-fatal diagnostic, e.g. an unrecognised key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Warning {
    pub location: Location,
    pub message: String,
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

pub fn parse_spec(source: &str) -> Result<WorkflowSpec, SpecError> {
    parse_spec_with_warnings(source).map(|(spec, _)| spec)
}

/// Parses and returns warnings for unknown keys alongside the spec.
pub fn parse_spec_with_warnings(source: &str) -> Result<(WorkflowSpec, Vec<Warning>), SpecError> {
    let normalized = join_line_continuations(source);
    let doc: Table = normalized.parse().map_err(|e: toml::de::Error| SpecError::Syntax {
        message: e.to_string().trim_end().to_string(),
    })?;
    let mut parser = Parser::default();
    let spec = parser.document(&doc)?;
    Ok((spec, parser.warnings))
}

/// Parses and checks acyclicity.
pub fn load_spec(source: &str) -> Result<WorkflowSpec, SpecError> {
    let spec = parse_spec(source)?;
    validate_acyclic(&spec)?;
    Ok(spec)
}

/// Checks that `depends_on` over all declared tasks forms a DAG. On failure the
/// error carries one witness cycle, e.g. `[A, B, A]` when A depends on B and B
/// depends on A.
pub fn validate_acyclic(spec: &WorkflowSpec) -> Result<(), SpecError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Unvisited,
        OnStack,
        Done,
    }

    let names: Vec<&str> = spec.tasks.keys().map(String::as_str).collect();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let deps: Vec<Vec<usize>> = names
        .iter()
        .map(|n| {
            spec.tasks[*n]
                .depends_on
                .iter()
                .filter_map(|d| index.get(d.as_str()).copied())
                .collect()
        })
        .collect();

    let mut mark = vec![Mark::Unvisited; names.len()];
    for root in 0..names.len() {
        if mark[root] != Mark::Unvisited {
            continue;
        }
        // (node, next dependency to explore)
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        mark[root] = Mark::OnStack;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if let Some(&dep) = deps[node].get(*next) {
                *next += 1;
                match mark[dep] {
                    Mark::Unvisited => {
                        mark[dep] = Mark::OnStack;
                        stack.push((dep, 0));
                    }
                    Mark::OnStack => {
                        let start = stack.iter().position(|(n, _)| *n == dep).unwrap();
                        let mut path: Vec<String> =
                            stack[start..].iter().map(|(n, _)| names[*n].to_string()).collect();
                        path.push(names[dep].to_string());
                        return Err(SpecError::Cycle { path });
                    }
                    Mark::Done => {}
                }
            } else {
                mark[node] = Mark::Done;
                stack.pop();
            }
        }
    }
    Ok(())
}

impl WorkflowSpec {
    /// Renders the spec back into the TOML dialect. Re-parsing the output
    /// yields a structurally equal spec.
    pub fn to_toml(&self) -> String {
        let mut doc = Table::new();

        let tasks: Vec<Value> = self
            .tasks
            .values()
            .map(|t| {
                let mut tbl = Table::new();
                tbl.insert("name".into(), t.name.clone().into());
                tbl.insert("command".into(), t.command.as_str().into());
                tbl.insert("execsite".into(), t.execsite.clone().into());
                if !t.depends_on.is_empty() {
                    tbl.insert("depends_on".into(), string_array(&t.depends_on));
                }
                if !t.add_tasks.is_empty() {
                    tbl.insert("add_tasks".into(), string_array(&t.add_tasks));
                }
                if !t.inputs.is_empty() {
                    tbl.insert("input".into(), string_table(&t.inputs));
                }
                if !t.outputs.is_empty() {
                    tbl.insert("output".into(), string_table(&t.outputs));
                }
                if let Some(h) = &t.hitl {
                    let mut ht = Table::new();
                    ht.insert("enabled".into(), h.enabled.into());
                    if let Some(input) = &h.input {
                        ht.insert("input".into(), input.clone().into());
                    }
                    ht.insert("message".into(), h.message.clone().into());
                    ht.insert("decision_output".into(), h.decision_output.clone().into());
                    if let Some(timeout) = h.timeout {
                        ht.insert("timeout".into(), format_duration(timeout).into());
                    }
                    tbl.insert("hitl".into(), Value::Table(ht));
                }
                if let Some(c) = &t.container {
                    tbl.insert("container".into(), c.clone().into());
                }
                Value::Table(tbl)
            })
            .collect();
        doc.insert("task".into(), Value::Array(tasks));

        let mut sites = Table::new();
        for site in self.execsites.values() {
            let mut tbl = Table::new();
            tbl.insert("kind".into(), site.kind.as_str().into());
            for (k, v) in [("host", &site.host), ("key", &site.key), ("user", &site.user)] {
                if let Some(v) = v {
                    tbl.insert(k.into(), v.clone().into());
                }
            }
            tbl.insert("status_dir".into(), site.status_dir.clone().into());
            tbl.insert("poll_interval".into(), format_duration(site.poll_interval).into());
            tbl.insert("container_runtime".into(), site.container_runtime.clone().into());
            if let Some(b) = &site.backend {
                tbl.insert("backend".into(), b.clone().into());
            }
            let b = &site.batch;
            tbl.insert("seed".into(), Value::Integer(b.seed as i64));
            tbl.insert("queue_delay".into(), delay_value(&b.queue_delay));
            tbl.insert("run_time".into(), delay_value(&b.run_time));
            tbl.insert(
                "max_concurrent_running".into(),
                Value::Integer(b.max_concurrent_running as i64),
            );
            if let Some(c) = b.capacity {
                tbl.insert("capacity".into(), Value::Integer(c as i64));
            }
            if let Some(cap) = b.run_cap {
                tbl.insert("run_cap".into(), format_duration(cap).into());
            }
            tbl.insert("tick".into(), format_duration(b.tick).into());
            sites.insert(site.name.clone(), Value::Table(tbl));
        }
        doc.insert("execsites".into(), Value::Table(sites));

        let mut workflow = Table::new();
        workflow.insert("tasks".into(), string_array(&self.initial_active));
        doc.insert("workflow".into(), Value::Table(workflow));

        toml::to_string(&doc).expect("spec tables always serialize")
    }
}

fn string_array(items: &[String]) -> Value {
    Value::Array(items.iter().cloned().map(Value::String).collect())
}

fn string_table(map: &BTreeMap<String, String>) -> Value {
    Value::Table(map.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect())
}

fn delay_value(model: &DelayModel) -> Value {
    match model {
        DelayModel::Fixed { delay } => format_duration(*delay).into(),
        DelayModel::Uniform { min, max } => Value::Array(vec![
            format_duration(*min).into(),
            format_duration(*max).into(),
        ]),
    }
}

pub fn format_duration(d: Duration) -> String {
    let nanos = d.as_nanos();
    if nanos.is_multiple_of(1_000_000_000) {
        format!("{}s", nanos / 1_000_000_000)
    } else if nanos.is_multiple_of(1_000_000) {
        format!("{}ms", nanos / 1_000_000)
    } else if nanos.is_multiple_of(1_000) {
        format!("{}us", nanos / 1_000)
    } else {
        format!("{nanos}ns")
    }
}

/// Parses `"250ms"`, `"1.5s"`, `"2m"`, `"10us"`, `"7ns"`.
pub fn parse_duration_str(text: &str) -> Option<Duration> {
    let text = text.trim();
    let split = text.find(|c: char| !(c.is_ascii_digit() || c == '.'))?;
    let (number, unit) = text.split_at(split);
    let value: f64 = number.parse().ok()?;
    if !value.is_finite() || value < 0.0 {
        return None;
    }
    let secs = match unit.trim() {
        "ns" => value / 1e9,
        "us" => value / 1e6,
        "ms" => value / 1e3,
        "s" => value,
        "m" => value * 60.0,
        _ => return None,
    };
    // integral nanosecond inputs stay exact
    if unit.trim() == "ns" && value.fract() == 0.0 {
        return Some(Duration::from_nanos(value as u64));
    }
    Some(Duration::from_nanos((secs * 1e9).round() as u64))
}

/// Single-line basic strings may not contain newlines, yet workflow files
/// commonly continue long shell commands with a trailing backslash. Inside a
/// single-line basic string, `\` followed by a line break is folded the way
/// TOML folds it in multi-line strings: the backslash and all following
/// whitespace are dropped. Valid TOML never contains that sequence, so this
/// is the identity on valid input.
pub fn join_line_continuations(source: &str) -> String {
    #[derive(PartialEq)]
    enum State {
        Normal,
        Comment,
        Basic,
        Literal,
        MultiBasic,
        MultiLiteral,
    }

    let chars: Vec<char> = source.chars().collect();
    let mut out = String::with_capacity(source.len());
    let mut state = State::Normal;
    let mut i = 0;
    let starts = |i: usize, pat: &str| pat.chars().enumerate().all(|(k, c)| chars.get(i + k) == Some(&c));

    while i < chars.len() {
        let c = chars[i];
        match state {
            State::Normal => {
                if starts(i, "\"\"\"") {
                    out.push_str("\"\"\"");
                    i += 3;
                    state = State::MultiBasic;
                    continue;
                } else if starts(i, "'''") {
                    out.push_str("'''");
                    i += 3;
                    state = State::MultiLiteral;
                    continue;
                }
                match c {
                    '"' => state = State::Basic,
                    '\'' => state = State::Literal,
                    '#' => state = State::Comment,
                    _ => {}
                }
                out.push(c);
            }
            State::Comment => {
                if c == '\n' {
                    state = State::Normal;
                }
                out.push(c);
            }
            State::Basic => {
                if c == '\\' {
                    let mut j = i + 1;
                    while matches!(chars.get(j), Some(' ' | '\t')) {
                        j += 1;
                    }
                    let line_break = match (chars.get(j), chars.get(j + 1)) {
                        (Some('\n'), _) => Some(j + 1),
                        (Some('\r'), Some('\n')) => Some(j + 2),
                        _ => None,
                    };
                    if let Some(mut k) = line_break {
                        while matches!(chars.get(k), Some(' ' | '\t' | '\n' | '\r')) {
                            k += 1;
                        }
                        i = k;
                        continue;
                    }
                    out.push(c);
                    if let Some(&next) = chars.get(i + 1) {
                        out.push(next);
                    }
                    i += 2;
                    continue;
                }
                if c == '"' || c == '\n' {
                    state = State::Normal;
                }
                out.push(c);
            }
            State::Literal => {
                if c == '\'' || c == '\n' {
                    state = State::Normal;
                }
                out.push(c);
            }
            State::MultiBasic => {
                if c == '\\' {
                    out.push(c);
                    if let Some(&next) = chars.get(i + 1) {
                        out.push(next);
                    }
                    i += 2;
                    continue;
                }
                if starts(i, "\"\"\"") {
                    out.push_str("\"\"\"");
                    i += 3;
                    state = State::Normal;
                    continue;
                }
                out.push(c);
            }
            State::MultiLiteral => {
                if starts(i, "'''") {
                    out.push_str("'''");
                    i += 3;
                    state = State::Normal;
                    continue;
                }
                out.push(c);
            }
        }
        i += 1;
    }
    out
}

#[derive(Default)]
struct Parser {
    warnings: Vec<Warning>,
}

impl Parser {
    fn warn(&mut self, location: Location, message: impl Into<String>) {
        self.warnings.push(Warning {
            location,
            message: message.into(),
        });
    }

    fn document(&mut self, doc: &Table) -> Result<WorkflowSpec, SpecError> {
        for key in doc.keys() {
            if !matches!(key.as_str(), "task" | "execsites" | "workflow") {
                self.warn(Location::table(key.clone()), "unknown top-level key ignored");
            }
        }

        let mut execsites = BTreeMap::new();
        execsites.insert(LOCAL_SITE.to_string(), ExecSiteDecl::implicit_local());
        if let Some(value) = doc.get("execsites") {
            let table = value.as_table().ok_or_else(|| SpecError::InvalidValue {
                location: Location::table("execsites"),
                message: "expected a table of execsites".into(),
            })?;
            for (name, site) in table {
                let decl = self.execsite(name, site)?;
                execsites.insert(name.clone(), decl);
            }
        }

        let mut tasks: BTreeMap<String, TaskDecl> = BTreeMap::new();
        let mut order: Vec<(String, String)> = Vec::new();
        match doc.get("task") {
            None => {}
            Some(Value::Array(items)) => {
                for (i, item) in items.iter().enumerate() {
                    let fallback = format!("task[{i}]");
                    let table = item.as_table().ok_or_else(|| SpecError::InvalidValue {
                        location: Location::table(fallback.clone()),
                        message: "expected a table".into(),
                    })?;
                    let decl = self.task(&fallback, table)?;
                    let label = format!("task.{}", decl.name);
                    if tasks.contains_key(&decl.name) {
                        return Err(SpecError::DuplicateTask {
                            location: Location::key(fallback, "name"),
                            name: decl.name,
                        });
                    }
                    order.push((decl.name.clone(), label));
                    tasks.insert(decl.name.clone(), decl);
                }
            }
            Some(_) => {
                return Err(SpecError::InvalidValue {
                    location: Location::table("task"),
                    message: "expected an array of [[task]] tables".into(),
                })
            }
        }

        let mut initial_active = Vec::new();
        if let Some(value) = doc.get("workflow") {
            let table = value.as_table().ok_or_else(|| SpecError::InvalidValue {
                location: Location::table("workflow"),
                message: "expected a table".into(),
            })?;
            for key in table.keys() {
                if key != "tasks" {
                    self.warn(Location::key("workflow", key.clone()), "unknown key ignored");
                }
            }
            if let Some(list) = table.get("tasks") {
                initial_active = string_list(list, || Location::key("workflow", "tasks"))?;
            }
        }

        // cross-references, in declaration order
        for (name, label) in &order {
            let decl = &tasks[name];
            if !execsites.contains_key(&decl.execsite) {
                return Err(SpecError::UnknownExecsite {
                    location: Location::key(label.clone(), "execsite"),
                    name: decl.execsite.clone(),
                });
            }
            for (field, list) in [("depends_on", &decl.depends_on), ("add_tasks", &decl.add_tasks)] {
                if let Some(missing) = list.iter().find(|d| !tasks.contains_key(*d)) {
                    return Err(SpecError::UnknownTask {
                        location: Location::key(label.clone(), field),
                        name: missing.clone(),
                    });
                }
            }
        }
        let mut seen = BTreeSet::new();
        for name in &initial_active {
            if !tasks.contains_key(name) {
                return Err(SpecError::UnknownTask {
                    location: Location::key("workflow", "tasks"),
                    name: name.clone(),
                });
            }
            if !seen.insert(name) {
                return Err(SpecError::InvalidValue {
                    location: Location::key("workflow", "tasks"),
                    message: format!("task `{name}` is listed more than once"),
                });
            }
        }

        Ok(WorkflowSpec {
            tasks,
            initial_active,
            execsites,
        })
    }

    fn task(&mut self, fallback: &str, table: &Table) -> Result<TaskDecl, SpecError> {
        let name = match table.get("name") {
            None => {
                return Err(SpecError::MissingField {
                    location: Location::table(fallback),
                    field: "name".into(),
                })
            }
            Some(v) => string_value(v, || Location::key(fallback, "name"))?,
        };
        if name.trim().is_empty() {
            return Err(SpecError::InvalidValue {
                location: Location::key(fallback, "name"),
                message: "task name must be non-empty".into(),
            });
        }
        let label = format!("task.{name}");
        let loc = |key: &str| Location::key(label.clone(), key);

        let command = match table.get("command") {
            None => {
                return Err(SpecError::MissingField {
                    location: Location::table(label.clone()),
                    field: "command".into(),
                })
            }
            Some(v) => string_value(v, || loc("command"))?,
        };
        if command.trim().is_empty() {
            return Err(SpecError::InvalidValue {
                location: loc("command"),
                message: "command must be non-empty".into(),
            });
        }

        let execsite = match table.get("execsite") {
            Some(v) => string_value(v, || loc("execsite"))?,
            None => LOCAL_SITE.to_string(),
        };
        let depends_on = match table.get("depends_on") {
            Some(v) => string_list(v, || loc("depends_on"))?,
            None => Vec::new(),
        };
        let add_tasks = match table.get("add_tasks") {
            Some(v) => string_list(v, || loc("add_tasks"))?,
            None => Vec::new(),
        };
        let inputs = match table.get("input") {
            Some(v) => string_map(v, || loc("input"))?,
            None => BTreeMap::new(),
        };
        let mut outputs = match table.get("output") {
            Some(v) => string_map(v, || loc("output"))?,
            None => BTreeMap::new(),
        };
        let container = match table.get("container") {
            Some(v) => Some(string_value(v, || loc("container"))?),
            None => None,
        };

        let hitl = match table.get("hitl") {
            None => None,
            Some(v) => {
                let ht = v.as_table().ok_or_else(|| SpecError::InvalidValue {
                    location: loc("hitl"),
                    message: "expected a table".into(),
                })?;
                let hloc = |key: &str| Location::key(format!("{label}.hitl"), key);
                let enabled = match ht.get("enabled") {
                    Some(Value::Boolean(b)) => *b,
                    Some(_) => {
                        return Err(SpecError::InvalidValue {
                            location: hloc("enabled"),
                            message: "expected a boolean".into(),
                        })
                    }
                    None => true,
                };
                let input = match ht.get("input") {
                    Some(v) => Some(string_value(v, || hloc("input"))?),
                    None => None,
                };
                let message = match ht.get("message") {
                    Some(v) => string_value(v, || hloc("message"))?,
                    None => String::new(),
                };
                if enabled && message.trim().is_empty() {
                    return Err(SpecError::MissingField {
                        location: Location::table(format!("{label}.hitl")),
                        field: "message".into(),
                    });
                }
                // `output.hitl_decision` is the documented spelling; `hitl.decision_output` also works
                let decision_output = match (ht.get("decision_output"), outputs.remove("hitl_decision")) {
                    (Some(v), _) => string_value(v, || hloc("decision_output"))?,
                    (None, Some(path)) => path,
                    (None, None) => DEFAULT_DECISION_FILE.to_string(),
                };
                let timeout = match ht.get("timeout") {
                    Some(v) => Some(duration_value(v, || hloc("timeout"))?),
                    None => None,
                };
                for key in ht.keys() {
                    if !matches!(
                        key.as_str(),
                        "enabled" | "input" | "message" | "decision_output" | "timeout"
                    ) {
                        self.warn(hloc(key), "unknown key ignored");
                    }
                }
                Some(HitlSpec {
                    enabled,
                    input,
                    message,
                    decision_output,
                    timeout,
                })
            }
        };

        for key in table.keys() {
            if !matches!(
                key.as_str(),
                "name"
                    | "command"
                    | "execsite"
                    | "depends_on"
                    | "add_tasks"
                    | "input"
                    | "output"
                    | "hitl"
                    | "container"
            ) {
                self.warn(loc(key), "unknown key ignored");
            }
        }

        Ok(TaskDecl {
            name,
            command: TaskCommand::from_text(&command),
            execsite,
            depends_on,
            add_tasks,
            inputs,
            outputs,
            hitl,
            container,
        })
    }

    fn execsite(&mut self, name: &str, value: &Value) -> Result<ExecSiteDecl, SpecError> {
        let label = format!("execsites.\"{name}\"");
        let loc = |key: &str| Location::key(label.clone(), key);
        let table = value.as_table().ok_or_else(|| SpecError::InvalidValue {
            location: Location::table(label.clone()),
            message: "expected a table".into(),
        })?;
        let opt_string = |key: &str| -> Result<Option<String>, SpecError> {
            table.get(key).map(|v| string_value(v, || loc(key))).transpose()
        };

        let host = opt_string("host")?;
        let key = opt_string("key")?;
        let user = opt_string("user")?;
        let kind = match opt_string("kind")? {
            Some(k) => SiteKind::parse(&k).ok_or_else(|| SpecError::InvalidValue {
                location: loc("kind"),
                message: format!("unknown execsite kind `{k}` (expected local, batch_sim or remote_batch)"),
            })?,
            None if name == LOCAL_SITE => SiteKind::Local,
            None if host.is_some() => SiteKind::RemoteBatch,
            None => SiteKind::BatchSim,
        };
        if kind == SiteKind::RemoteBatch {
            for (field, v) in [("host", &host), ("key", &key), ("user", &user)] {
                if v.is_none() {
                    return Err(SpecError::MissingField {
                        location: Location::table(label.clone()),
                        field: field.into(),
                    });
                }
            }
        }

        let mut site = ExecSiteDecl::with_defaults(name, kind);
        site.host = host;
        site.key = key;
        site.user = user;
        if let Some(dir) = opt_string("status_dir")? {
            if dir.trim().is_empty() {
                return Err(SpecError::InvalidValue {
                    location: loc("status_dir"),
                    message: "status_dir must be non-empty".into(),
                });
            }
            site.status_dir = dir;
        }
        if let Some(v) = table.get("poll_interval") {
            site.poll_interval = positive_duration(v, || loc("poll_interval"))?;
        }
        if let Some(rt) = opt_string("container_runtime")? {
            site.container_runtime = rt;
        }
        site.backend = opt_string("backend")?;

        let batch = &mut site.batch;
        if let Some(v) = table.get("seed") {
            batch.seed = non_negative_int(v, || loc("seed"))?;
        }
        if let Some(v) = table.get("queue_delay") {
            batch.queue_delay = delay_model(v, || loc("queue_delay"))?;
        }
        if let Some(v) = table.get("run_time") {
            batch.run_time = delay_model(v, || loc("run_time"))?;
        }
        if let Some(v) = table.get("max_concurrent_running") {
            let n = non_negative_int(v, || loc("max_concurrent_running"))?;
            if n == 0 {
                return Err(SpecError::InvalidValue {
                    location: loc("max_concurrent_running"),
                    message: "must be at least 1".into(),
                });
            }
            batch.max_concurrent_running = n as usize;
        }
        if let Some(v) = table.get("capacity") {
            batch.capacity = Some(non_negative_int(v, || loc("capacity"))? as usize);
        }
        if let Some(v) = table.get("run_cap") {
            batch.run_cap = Some(positive_duration(v, || loc("run_cap"))?);
        }
        if let Some(v) = table.get("tick") {
            batch.tick = positive_duration(v, || loc("tick"))?;
        }

        for k in table.keys() {
            if !matches!(
                k.as_str(),
                "kind"
                    | "host"
                    | "key"
                    | "user"
                    | "status_dir"
                    | "poll_interval"
                    | "container_runtime"
                    | "backend"
                    | "seed"
                    | "queue_delay"
                    | "run_time"
                    | "max_concurrent_running"
                    | "capacity"
                    | "run_cap"
                    | "tick"
            ) {
                self.warn(loc(k), "unknown key ignored");
            }
        }
        Ok(site)
    }
}

fn string_value(value: &Value, loc: impl Fn() -> Location) -> Result<String, SpecError> {
    value.as_str().map(str::to_string).ok_or_else(|| SpecError::InvalidValue {
        location: loc(),
        message: format!("expected a string, found {}", value.type_str()),
    })
}

fn string_list(value: &Value, loc: impl Fn() -> Location) -> Result<Vec<String>, SpecError> {
    let items = value.as_array().ok_or_else(|| SpecError::InvalidValue {
        location: loc(),
        message: format!("expected an array of strings, found {}", value.type_str()),
    })?;
    items.iter().map(|v| string_value(v, &loc)).collect()
}

fn string_map(value: &Value, loc: impl Fn() -> Location) -> Result<BTreeMap<String, String>, SpecError> {
    let table = value.as_table().ok_or_else(|| SpecError::InvalidValue {
        location: loc(),
        message: format!("expected a table of label = path, found {}", value.type_str()),
    })?;
    table
        .iter()
        .map(|(k, v)| {
            let path = string_value(v, || {
                let base = loc();
                Location::key(base.to_string(), k.clone())
            })?;
            Ok((k.clone(), path))
        })
        .collect()
}

fn non_negative_int(value: &Value, loc: impl Fn() -> Location) -> Result<u64, SpecError> {
    match value.as_integer() {
        Some(n) if n >= 0 => Ok(n as u64),
        _ => Err(SpecError::InvalidValue {
            location: loc(),
            message: "expected a non-negative integer".into(),
        }),
    }
}

/// Numbers are seconds; strings carry a unit suffix.
fn duration_value(value: &Value, loc: impl Fn() -> Location) -> Result<Duration, SpecError> {
    let parsed = match value {
        Value::Integer(n) if *n >= 0 => Some(Duration::from_secs(*n as u64)),
        Value::Float(f) if f.is_finite() && *f >= 0.0 => Some(Duration::from_secs_f64(*f)),
        Value::String(s) => parse_duration_str(s),
        _ => None,
    };
    parsed.ok_or_else(|| SpecError::InvalidValue {
        location: loc(),
        message: "expected a duration (seconds, or a string such as \"250ms\")".into(),
    })
}

fn positive_duration(value: &Value, loc: impl Fn() -> Location) -> Result<Duration, SpecError> {
    let d = duration_value(value, &loc)?;
    if d.is_zero() {
        return Err(SpecError::InvalidValue {
            location: loc(),
            message: "duration must be positive".into(),
        });
    }
    Ok(d)
}

/// A single duration is a fixed delay; a two-element array is uniform on `[min, max]`.
fn delay_model(value: &Value, loc: impl Fn() -> Location) -> Result<DelayModel, SpecError> {
    match value {
        Value::Array(items) => {
            if items.len() != 2 {
                return Err(SpecError::InvalidValue {
                    location: loc(),
                    message: "uniform delay needs exactly [min, max]".into(),
                });
            }
            let min = duration_value(&items[0], &loc)?;
            let max = duration_value(&items[1], &loc)?;
            if min > max {
                return Err(SpecError::InvalidValue {
                    location: loc(),
                    message: "uniform delay has min > max".into(),
                });
            }
            Ok(DelayModel::Uniform { min, max })
        }
        other => Ok(DelayModel::Fixed {
            delay: duration_value(other, loc)?,
        }),
    }
}
