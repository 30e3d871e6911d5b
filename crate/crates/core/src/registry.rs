//! Authoritative per-instance state machine with an append-only event log.
//!
//! The state of every instance is, at all times, the fold of the event log.
//! When backed by a run directory each event is appended to `events.log`
//! (one JSON object per line) before the in-memory state changes become
//! visible, and `state.json` is rewritten atomically afterwards.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_json_atomic;
use crate::ids::InstanceId;

pub const EVENTS_FILE: &str = "events.log";
pub const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskState {
    Pending,
    Ready,
    Submitted,
    Running,
    AwaitingDecision,
    Succeeded,
    Failed,
    Cancelled,
}

impl TaskState {
    pub const ALL: [TaskState; 8] = [
        TaskState::Pending,
        TaskState::Ready,
        TaskState::Submitted,
        TaskState::Running,
        TaskState::AwaitingDecision,
        TaskState::Succeeded,
        TaskState::Failed,
        TaskState::Cancelled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Succeeded | TaskState::Failed | TaskState::Cancelled)
    }

    /// Legal moves of the instance lifecycle. `Submitted → Failed` covers
    /// launch errors and jobs lost across a coordinator restart.
    pub fn can_transition(self, to: TaskState) -> bool {
        use TaskState::*;
        if self.is_terminal() {
            return false;
        }
        if to == Cancelled {
            return true;
        }
        matches!(
            (self, to),
            (Pending, Ready)
                | (Ready, Submitted)
                | (Submitted, Running)
                | (Submitted, Failed)
                | (Running, Succeeded)
                | (Running, Failed)
                | (Running, AwaitingDecision)
                | (AwaitingDecision, Succeeded)
                | (AwaitingDecision, Failed)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Pending => "Pending",
            TaskState::Ready => "Ready",
            TaskState::Submitted => "Submitted",
            TaskState::Running => "Running",
            TaskState::AwaitingDecision => "AwaitingDecision",
            TaskState::Succeeded => "Succeeded",
            TaskState::Failed => "Failed",
            TaskState::Cancelled => "Cancelled",
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One state change. `from` is `None` for the event that registers an instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub instance: InstanceId,
    pub from: Option<TaskState>,
    pub to: TaskState,
    pub detail: String,
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("illegal transition for {instance}: {} -> {to}", from.map(|s| s.as_str()).unwrap_or("(none)"))]
    IllegalTransition {
        instance: InstanceId,
        from: Option<TaskState>,
        to: TaskState,
    },
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("instance {0} is already registered")]
    AlreadyRegistered(InstanceId),
    #[error("corrupt event log at line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("event log i/o: {0}")]
    Io(#[from] io::Error),
}

pub type StateMap = BTreeMap<InstanceId, TaskState>;

#[derive(Serialize, Deserialize)]
struct StateSnapshot {
    seq: u64,
    states: StateMap,
}

struct LogSink {
    file: File,
    state_path: PathBuf,
}

#[derive(Default)]
pub struct JobRegistry {
    states: StateMap,
    events: Vec<Event>,
    sink: Option<LogSink>,
}

impl fmt::Debug for JobRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JobRegistry")
            .field("states", &self.states)
            .field("events", &self.events.len())
            .field("persistent", &self.sink.is_some())
            .finish()
    }
}

/// What [`JobRegistry::recover`] had to repair.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RecoveryReport {
    pub events: usize,
    pub dropped_tail: bool,
}

impl JobRegistry {
    /// In-memory registry, nothing persisted.
    pub fn new() -> Self {
        Self::default()
    }

    /// Fresh registry that appends to `<run_dir>/events.log`.
    pub fn create(run_dir: &Path) -> Result<Self, RegistryError> {
        fs::create_dir_all(run_dir)?;
        let path = run_dir.join(EVENTS_FILE);
        let file = OpenOptions::new().create(true).truncate(true).write(true).open(&path)?;
        let reg = Self {
            states: BTreeMap::new(),
            events: Vec::new(),
            sink: Some(LogSink {
                file,
                state_path: run_dir.join(STATE_FILE),
            }),
        };
        reg.write_state()?;
        Ok(reg)
    }

    /// Rebuilds the registry by folding `<run_dir>/events.log`. A truncated
    /// final record is dropped (and cut from the file); corruption anywhere
    /// else is fatal.
    pub fn recover(run_dir: &Path) -> Result<(Self, RecoveryReport), RegistryError> {
        let path = run_dir.join(EVENTS_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let (events, good_len) = parse_log(&bytes)?;
        let dropped_tail = good_len < bytes.len();
        if dropped_tail {
            warn!(
                "{}: dropping {} trailing bytes of a truncated record",
                path.display(),
                bytes.len() - good_len
            );
        }

        let mut reg = Self::new();
        for event in &events {
            reg.apply(event.clone())?;
        }

        let file = OpenOptions::new().create(true).write(true).truncate(false).open(&path)?;
        file.set_len(good_len as u64)?;
        let mut file = file;
        io::Seek::seek(&mut file, io::SeekFrom::End(0))?;
        reg.sink = Some(LogSink {
            file,
            state_path: run_dir.join(STATE_FILE),
        });
        reg.write_state()?;
        let report = RecoveryReport {
            events: reg.events.len(),
            dropped_tail,
        };
        Ok((reg, report))
    }

    pub fn state(&self, instance: &InstanceId) -> Option<TaskState> {
        self.states.get(instance).copied()
    }

    pub fn snapshot(&self) -> StateMap {
        self.states.clone()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn last_seq(&self) -> u64 {
        self.events.last().map_or(0, |e| e.seq)
    }

    pub fn instances(&self) -> impl Iterator<Item = (&InstanceId, TaskState)> {
        self.states.iter().map(|(id, s)| (id, *s))
    }

    pub fn register(&mut self, instance: InstanceId, detail: impl Into<String>) -> Result<Event, RegistryError> {
        if self.states.contains_key(&instance) {
            return Err(RegistryError::AlreadyRegistered(instance));
        }
        self.record(instance, None, TaskState::Pending, detail.into())
    }

    /// Moves `instance` to `to`. A transition to the state the instance is
    /// already in is accepted as a no-op and returns `None`.
    pub fn transition(
        &mut self,
        instance: &InstanceId,
        to: TaskState,
        detail: impl Into<String>,
    ) -> Result<Option<Event>, RegistryError> {
        let from = self
            .state(instance)
            .ok_or_else(|| RegistryError::UnknownInstance(instance.clone()))?;
        if from == to {
            return Ok(None);
        }
        if !from.can_transition(to) {
            return Err(RegistryError::IllegalTransition {
                instance: instance.clone(),
                from: Some(from),
                to,
            });
        }
        self.record(instance.clone(), Some(from), to, detail.into()).map(Some)
    }

    fn record(
        &mut self,
        instance: InstanceId,
        from: Option<TaskState>,
        to: TaskState,
        detail: String,
    ) -> Result<Event, RegistryError> {
        let event = Event {
            seq: self.last_seq() + 1,
            timestamp: Utc::now(),
            instance,
            from,
            to,
            detail,
        };
        if let Some(sink) = &mut self.sink {
            let mut line = serde_json::to_vec(&event).map_err(io::Error::other)?;
            line.push(b'\n');
            sink.file.write_all(&line)?;
            sink.file.flush()?;
        }
        self.states.insert(event.instance.clone(), to);
        self.events.push(event.clone());
        self.write_state()?;
        Ok(event)
    }

    /// Replays an already-recorded event. Its seq must follow the last one.
    pub fn apply(&mut self, event: Event) -> Result<(), RegistryError> {
        let expected = self.last_seq() + 1;
        if event.seq != expected {
            return Err(RegistryError::CorruptLog {
                line: self.events.len() + 1,
                message: format!("expected seq {expected}, found {}", event.seq),
            });
        }
        let current = self.state(&event.instance);
        let legal = match (current, event.from) {
            (None, None) => event.to == TaskState::Pending,
            (Some(cur), Some(from)) => cur == from && from.can_transition(event.to),
            _ => false,
        };
        if !legal {
            return Err(RegistryError::IllegalTransition {
                instance: event.instance.clone(),
                from: current,
                to: event.to,
            });
        }
        self.states.insert(event.instance.clone(), event.to);
        self.events.push(event);
        Ok(())
    }

    fn write_state(&self) -> Result<(), RegistryError> {
        if let Some(sink) = &self.sink {
            let snapshot = StateSnapshot {
                seq: self.last_seq(),
                states: self.states.clone(),
            };
            write_json_atomic(&sink.state_path, &snapshot)?;
        }
        Ok(())
    }
}

/// Parses complete log lines; returns the events and the byte length of the
/// valid prefix. Only the final record may be damaged.
fn parse_log(bytes: &[u8]) -> Result<(Vec<Event>, usize), RegistryError> {
    let mut events = Vec::new();
    let mut offset = 0;
    let mut line_no = 0;
    while offset < bytes.len() {
        line_no += 1;
        let rest = &bytes[offset..];
        let (line, next, terminated) = match rest.iter().position(|b| *b == b'\n') {
            Some(i) => (&rest[..i], offset + i + 1, true),
            None => (rest, bytes.len(), false),
        };
        let is_last = next >= bytes.len();
        if line.iter().all(|b| b.is_ascii_whitespace()) {
            if !terminated {
                break;
            }
            offset = next;
            continue;
        }
        match serde_json::from_slice::<Event>(line) {
            Ok(event) if terminated => events.push(event),
            Ok(_) | Err(_) if is_last => return Ok((events, offset)),
            Ok(_) => unreachable!("unterminated line is always last"),
            Err(e) => {
                return Err(RegistryError::CorruptLog {
                    line: line_no,
                    message: e.to_string(),
                })
            }
        }
        offset = next;
    }
    Ok((events, offset))
}

/// Reads an events file without taking ownership of it. A torn trailing
/// record (a writer mid-append, or a crash) is ignored.
pub fn read_events(path: &Path) -> Result<Vec<Event>, RegistryError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    parse_log(&bytes).map(|(events, _)| events)
}

/// State map obtained by replaying `events` through the transition rules.
pub fn fold_events(events: &[Event]) -> Result<StateMap, RegistryError> {
    let mut reg = JobRegistry::new();
    for e in events {
        reg.apply(e.clone())?;
    }
    Ok(reg.states)
}

/// Reads the last `state.json` snapshot written to a run directory.
pub fn read_state_file(run_dir: &Path) -> Result<Option<(u64, StateMap)>, RegistryError> {
    match fs::read(run_dir.join(STATE_FILE)) {
        Ok(bytes) => {
            let snap: StateSnapshot = serde_json::from_slice(&bytes).map_err(io::Error::other)?;
            Ok(Some((snap.seq, snap.states)))
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn id(s: &str) -> InstanceId {
        s.parse().unwrap()
    }

    #[test]
    fn first_legal_transition_gets_seq_after_registration() {
        let mut reg = JobRegistry::new();
        let e0 = reg.register(id("t#1"), "initial").unwrap();
        assert_eq!(e0.seq, 1);
        let e1 = reg.transition(&id("t#1"), TaskState::Ready, "").unwrap().unwrap();
        assert_eq!(e1.seq, 2);
        assert_eq!(e1.from, Some(TaskState::Pending));
    }

    #[test]
    fn terminal_states_refuse_transitions() {
        let mut reg = JobRegistry::new();
        let t = id("t#1");
        reg.register(t.clone(), "").unwrap();
        for s in [TaskState::Ready, TaskState::Submitted, TaskState::Running, TaskState::Succeeded] {
            reg.transition(&t, s, "").unwrap();
        }
        let err = reg.transition(&t, TaskState::Running, "").unwrap_err();
        assert!(matches!(err, RegistryError::IllegalTransition { .. }));
        assert!(reg.transition(&t, TaskState::Cancelled, "").is_err());
    }

    #[test]
    fn duplicate_signal_is_a_noop() {
        let mut reg = JobRegistry::new();
        let t = id("t#1");
        reg.register(t.clone(), "").unwrap();
        reg.transition(&t, TaskState::Ready, "").unwrap();
        assert_eq!(reg.transition(&t, TaskState::Ready, "again").unwrap(), None);
        assert_eq!(reg.events().len(), 2);
    }

    #[test]
    fn unknown_instance_is_an_error() {
        let mut reg = JobRegistry::new();
        assert!(matches!(
            reg.transition(&id("x#1"), TaskState::Ready, ""),
            Err(RegistryError::UnknownInstance(_))
        ));
    }

    #[test]
    fn transition_table_matches_lifecycle() {
        use TaskState::*;
        let legal = [
            (Pending, Ready),
            (Ready, Submitted),
            (Submitted, Running),
            (Submitted, Failed),
            (Running, Succeeded),
            (Running, Failed),
            (Running, AwaitingDecision),
            (AwaitingDecision, Succeeded),
            (AwaitingDecision, Failed),
        ];
        for from in TaskState::ALL {
            for to in TaskState::ALL {
                let expected = !from.is_terminal() && (to == Cancelled || legal.contains(&(from, to)));
                assert_eq!(from.can_transition(to), expected, "{from} -> {to}");
            }
        }
    }

    #[test]
    fn empty_log_recovers_to_empty_registry() {
        let dir = tempfile::tempdir().unwrap();
        let (reg, report) = JobRegistry::recover(dir.path()).unwrap();
        assert!(reg.snapshot().is_empty());
        assert_eq!(report, RecoveryReport::default());
    }

    #[test]
    fn truncated_tail_is_dropped_and_appends_continue() {
        let dir = tempfile::tempdir().unwrap();
        let t = id("t#1");
        {
            let mut reg = JobRegistry::create(dir.path()).unwrap();
            reg.register(t.clone(), "").unwrap();
            reg.transition(&t, TaskState::Ready, "").unwrap();
            reg.transition(&t, TaskState::Submitted, "").unwrap();
            reg.transition(&t, TaskState::Running, "").unwrap();
            reg.transition(&t, TaskState::Succeeded, "exit 0").unwrap();
        }
        let path = dir.path().join(EVENTS_FILE);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"seq":6,"timestamp":"2026-"#).unwrap();
        drop(f);

        let (mut reg, report) = JobRegistry::recover(dir.path()).unwrap();
        assert_eq!(report.events, 5);
        assert!(report.dropped_tail);
        assert_eq!(reg.state(&t), Some(TaskState::Succeeded));
        reg.register(id("u#1"), "").unwrap();
        let events = read_events(&path).unwrap();
        assert_eq!(events.len(), 6);
        assert_eq!(events[5].seq, 6);
    }

    #[test]
    fn mid_log_corruption_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut reg = JobRegistry::create(dir.path()).unwrap();
            reg.register(id("a#1"), "").unwrap();
            reg.register(id("b#1"), "").unwrap();
        }
        let path = dir.path().join(EVENTS_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.insert(1, "not json");
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        assert!(matches!(
            JobRegistry::recover(dir.path()),
            Err(RegistryError::CorruptLog { line: 2, .. })
        ));
    }

    #[test]
    fn seq_gap_is_corruption() {
        let mut reg = JobRegistry::new();
        let e = reg.register(id("a#1"), "").unwrap();
        let mut replay = JobRegistry::new();
        let mut gapped = e.clone();
        gapped.seq = 2;
        assert!(matches!(replay.apply(gapped), Err(RegistryError::CorruptLog { .. })));
    }

    #[test]
    fn state_file_tracks_log() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = JobRegistry::create(dir.path()).unwrap();
        reg.register(id("a#1"), "").unwrap();
        reg.transition(&id("a#1"), TaskState::Ready, "").unwrap();
        let (seq, states) = read_state_file(dir.path()).unwrap().unwrap();
        assert_eq!(seq, 2);
        assert_eq!(states, reg.snapshot());
    }

    /// Random walk of legal transitions over a handful of instances.
    fn random_run(choices: &[(u8, u8)]) -> JobRegistry {
        let mut reg = JobRegistry::new();
        let ids: Vec<InstanceId> = (0..4).map(|i| InstanceId::first(format!("t{i}"))).collect();
        for id in &ids {
            reg.register(id.clone(), "").unwrap();
        }
        for &(who, pick) in choices {
            let id = &ids[who as usize % ids.len()];
            let from = reg.state(id).unwrap();
            let options: Vec<TaskState> =
                TaskState::ALL.into_iter().filter(|s| from.can_transition(*s)).collect();
            if options.is_empty() {
                continue;
            }
            let to = options[pick as usize % options.len()];
            reg.transition(id, to, format!("step {pick}")).unwrap();
        }
        reg
    }

    proptest! {
        #[test]
        fn snapshot_equals_fold_of_log(choices in prop::collection::vec((0u8..4, 0u8..8), 0..40)) {
            let reg = random_run(&choices);
            // fold at every prefix agrees with the running states
            let events = reg.events();
            let mut replay = JobRegistry::new();
            for e in events {
                replay.apply(e.clone()).unwrap();
            }
            prop_assert_eq!(fold_events(events).unwrap(), reg.snapshot());
            prop_assert_eq!(replay.snapshot(), reg.snapshot());
            for (i, e) in events.iter().enumerate() {
                prop_assert_eq!(e.seq, i as u64 + 1);
            }
        }

        #[test]
        fn recover_of_persisted_run_is_state_equal(choices in prop::collection::vec((0u8..4, 0u8..8), 0..30)) {
            let dir = tempfile::tempdir().unwrap();
            let mem = random_run(&choices);
            {
                let mut disk = JobRegistry::create(dir.path()).unwrap();
                for e in mem.events() {
                    match e.from {
                        None => { disk.register(e.instance.clone(), e.detail.clone()).unwrap(); }
                        Some(_) => { disk.transition(&e.instance, e.to, e.detail.clone()).unwrap(); }
                    }
                }
            }
            let (recovered, _) = JobRegistry::recover(dir.path()).unwrap();
            prop_assert_eq!(recovered.snapshot(), mem.snapshot());
            prop_assert_eq!(recovered.last_seq(), mem.last_seq());
        }
    }
}
