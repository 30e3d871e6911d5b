//! Resuming interrupted runs from their on-disk state. Each test fabricates
//! the directory a crashed coordinator would have left behind.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use flowgate_core::exec_local::{exit_path, marker_path, status_dir, task_dir};
use flowgate_core::hitl::{self, Verdict};
use flowgate_core::orchestrator::RunError;
use flowgate_core::registry::{fold_events, read_events, EVENTS_FILE};
use flowgate_core::rundir::{self, HANDLE_FILE, SPEC_FILE};
use flowgate_core::{
    parse_spec, run_workflow, Decision, Event, InstanceId, JobRegistry, Orchestrator, RunConfig, RunResult,
    TaskState, WorkflowSpec,
};

const PIPELINE: &str = r#"
[[task]]
name = "a"
command = "true"
[[task]]
name = "b"
command = "true"
depends_on = ["a"]
[[task]]
name = "c"
command = "modules.review"
depends_on = ["b"]
add_tasks = ["t"]
hitl.enabled = true
hitl.message = "more?"
[[task]]
name = "t"
command = "true"
[workflow]
tasks = ["a", "b", "c"]

[execsites."local"]
poll_interval = "20ms"
"#;

fn id(s: &str) -> InstanceId {
    s.parse().unwrap()
}

struct Crashed {
    run_dir: PathBuf,
    spec: WorkflowSpec,
    registry: JobRegistry,
}

/// A run directory with every initial instance registered and nothing else.
fn crashed_run(workdir: &Path) -> Crashed {
    let run_dir = rundir::run_dir(workdir, "crashed");
    fs::create_dir_all(&run_dir).unwrap();
    fs::write(run_dir.join(SPEC_FILE), PIPELINE).unwrap();
    let spec = parse_spec(PIPELINE).unwrap();
    let mut registry = JobRegistry::create(&run_dir).unwrap();
    for name in &spec.initial_active {
        registry.register(InstanceId::first(name.clone()), "initial").unwrap();
    }
    Crashed { run_dir, spec, registry }
}

impl Crashed {
    fn walk(&mut self, instance: &str, states: &[TaskState]) {
        for s in states {
            self.registry.transition(&id(instance), *s, "before the crash").unwrap();
        }
    }

    fn succeed(&mut self, instance: &str) {
        use TaskState::*;
        self.walk(instance, &[Ready, Submitted, Running, Succeeded]);
    }

    fn complete_on_disk(&self, instance: &str, code: i32) {
        let status = status_dir(&self.run_dir, self.spec.site("local").unwrap());
        fs::create_dir_all(&status).unwrap();
        fs::write(exit_path(&status, &id(instance)), code.to_string()).unwrap();
        fs::write(marker_path(&status, &id(instance)), "").unwrap();
    }

    fn write_handle(&self, instance: &str, handle: &str) {
        let dir = task_dir(&self.run_dir, &id(instance));
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join(HANDLE_FILE), handle).unwrap();
    }

    fn resume(self) -> flowgate_core::RunHandle {
        let run_dir = self.run_dir.clone();
        drop(self.registry);
        let mut cfg = RunConfig::new(run_dir.parent().unwrap());
        cfg.tick = Duration::from_millis(10);
        Orchestrator::resume(&run_dir, cfg).unwrap()
    }
}

fn submissions(events: &[Event], instance: &str) -> usize {
    let instance = id(instance);
    events
        .iter()
        .filter(|e| e.instance == instance && e.to == TaskState::Submitted)
        .count()
}

fn approve_when_prompted(handle: &flowgate_core::RunHandle, instance: &str) {
    let instance = id(instance);
    let start = std::time::Instant::now();
    while hitl::read_prompt(&handle.run_dir, &instance).unwrap().is_none() {
        assert!(start.elapsed() < Duration::from_secs(20), "{instance} was never prompted");
        std::thread::sleep(Duration::from_millis(10));
    }
    handle.decide(Decision::new(instance, Verdict::Approve)).unwrap();
}

fn assert_log_folds_to(result: &RunResult) {
    let events = read_events(&result.event_log).unwrap();
    assert_eq!(fold_events(&events).unwrap(), result.states);
}

#[test]
fn completion_during_downtime_is_picked_up_without_resubmission() {
    use TaskState::*;
    let dir = tempfile::tempdir().unwrap();
    let mut run = crashed_run(dir.path());
    run.walk("a#1", &[Ready, Submitted, Running]);
    run.complete_on_disk("a#1", 0);
    let handle = run.resume();
    approve_when_prompted(&handle, "c#1");
    let result = handle.wait().unwrap();

    assert!(result.all_succeeded(), "{:?}", result.states);
    let events = read_events(&result.event_log).unwrap();
    assert_eq!(submissions(&events, "a#1"), 1);
    assert_log_folds_to(&result);
}

#[test]
fn failed_completion_during_downtime_is_honoured() {
    use TaskState::*;
    let dir = tempfile::tempdir().unwrap();
    let mut run = crashed_run(dir.path());
    run.walk("a#1", &[Ready, Submitted, Running]);
    run.complete_on_disk("a#1", 2);
    let result = run.resume().wait().unwrap();
    assert_eq!(result.states[&id("a#1")], Failed);
    assert_eq!(result.states[&id("b#1")], Cancelled);
    assert_eq!(result.states[&id("c#1")], Cancelled);
}

#[test]
fn lost_instance_is_failed_with_unknown_exit() {
    use TaskState::*;
    let dir = tempfile::tempdir().unwrap();
    let mut run = crashed_run(dir.path());
    run.succeed("a#1");
    run.walk("b#1", &[Ready, Submitted, Running]);
    // a pid that cannot be alive
    run.write_handle("b#1", &format!("pid {}", i32::MAX));
    let result = run.resume().wait().unwrap();

    assert_eq!(result.states[&id("b#1")], Failed);
    assert_eq!(result.states[&id("c#1")], Cancelled);
    let events = read_events(&result.event_log).unwrap();
    let failed = events.iter().find(|e| e.instance == id("b#1") && e.to == Failed).unwrap();
    assert!(failed.detail.contains("exit code unknown"), "{}", failed.detail);
    assert_eq!(submissions(&events, "b#1"), 1);
    assert_log_folds_to(&result);
}

#[test]
fn submitted_without_handle_is_failed() {
    use TaskState::*;
    let dir = tempfile::tempdir().unwrap();
    let mut run = crashed_run(dir.path());
    run.walk("a#1", &[Ready, Submitted]);
    let result = run.resume().wait().unwrap();
    assert_eq!(result.states[&id("a#1")], Failed);
    assert_eq!(submissions(&read_events(&result.event_log).unwrap(), "a#1"), 1);
}

#[test]
fn live_process_is_adopted() {
    use TaskState::*;
    let dir = tempfile::tempdir().unwrap();
    let mut run = crashed_run(dir.path());
    run.walk("a#1", &[Ready, Submitted, Running]);
    let status = status_dir(&run.run_dir, run.spec.site("local").unwrap());
    fs::create_dir_all(&status).unwrap();
    let exit = exit_path(&status, &id("a#1"));
    let marker = marker_path(&status, &id("a#1"));
    // stands in for the wrapper of a job launched before the crash
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(format!(
            "sleep 0.4; printf 0 > '{0}.tmp' && mv '{0}.tmp' '{0}'; touch '{1}'",
            exit.display(),
            marker.display()
        ))
        .spawn()
        .unwrap();
    run.write_handle("a#1", &format!("pid {}", child.id()));

    let handle = run.resume();
    approve_when_prompted(&handle, "c#1");
    let result = handle.wait().unwrap();
    child.wait().unwrap();

    assert!(result.all_succeeded(), "{:?}", result.states);
    assert_eq!(submissions(&read_events(&result.event_log).unwrap(), "a#1"), 1);
    assert_log_folds_to(&result);
}

#[test]
fn awaiting_checkpoint_is_prompted_again() {
    use TaskState::*;
    let dir = tempfile::tempdir().unwrap();
    let mut run = crashed_run(dir.path());
    run.succeed("a#1");
    run.succeed("b#1");
    run.walk("c#1", &[Ready, Submitted, Running, AwaitingDecision]);
    let handle = run.resume();
    approve_when_prompted(&handle, "c#1");
    let result = handle.wait().unwrap();
    assert!(result.all_succeeded());
    assert_eq!(result.states.len(), 3);
}

#[test]
fn decision_recorded_before_the_crash_is_applied_once() {
    use TaskState::*;
    let dir = tempfile::tempdir().unwrap();
    let mut run = crashed_run(dir.path());
    run.succeed("a#1");
    run.succeed("b#1");
    run.walk("c#1", &[Ready, Submitted, Running, AwaitingDecision]);
    let mut d = Decision::new(id("c#1"), Verdict::Reject);
    d.add_tasks = vec!["t".into()];
    hitl::record_decision(&run.run_dir, &run.spec.tasks["c"], &d).unwrap();

    let result = run.resume().wait().unwrap();
    assert!(result.all_succeeded(), "{:?}", result.states);
    assert_eq!(result.states[&id("t#1")], Succeeded);
    assert_eq!(result.states.len(), 4);
    assert_log_folds_to(&result);
}

#[test]
fn addition_lost_between_decision_and_registration_is_restored() {
    use TaskState::*;
    let dir = tempfile::tempdir().unwrap();
    let mut run = crashed_run(dir.path());
    run.succeed("a#1");
    run.succeed("b#1");
    run.walk("c#1", &[Ready, Submitted, Running, AwaitingDecision]);
    let mut d = Decision::new(id("c#1"), Verdict::Reject);
    d.add_tasks = vec!["t".into()];
    hitl::record_decision(&run.run_dir, &run.spec.tasks["c"], &d).unwrap();
    run.walk("c#1", &[Succeeded]);

    let result = run.resume().wait().unwrap();
    assert_eq!(result.states[&id("t#1")], Succeeded);
    let events = read_events(&result.event_log).unwrap();
    let registered = events.iter().find(|e| e.instance == id("t#1") && e.from.is_none()).unwrap();
    assert_eq!(registered.detail, "added by c#1");
}

#[test]
fn torn_final_record_is_dropped() {
    use TaskState::*;
    let dir = tempfile::tempdir().unwrap();
    let mut run = crashed_run(dir.path());
    run.walk("a#1", &[Ready, Submitted, Running]);
    run.complete_on_disk("a#1", 0);
    let before = fold_events(&read_events(&run.run_dir.join(EVENTS_FILE)).unwrap()).unwrap();
    let mut log = OpenOptions::new().append(true).open(run.run_dir.join(EVENTS_FILE)).unwrap();
    log.write_all(br#"{"seq":99,"timestamp":"2026-"#).unwrap();
    drop(log);

    let (recovered, report) = JobRegistry::recover(&run.run_dir).unwrap();
    assert!(report.dropped_tail);
    assert_eq!(recovered.snapshot(), before);
    drop(recovered);

    let handle = run.resume();
    approve_when_prompted(&handle, "c#1");
    let result = handle.wait().unwrap();
    assert!(result.all_succeeded());
    assert_log_folds_to(&result);
}

#[test]
fn finished_run_is_not_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let spec = parse_spec("[[task]]\nname = \"a\"\ncommand = \"true\"\n[workflow]\ntasks = [\"a\"]\n").unwrap();
    let result = run_workflow(spec, RunConfig::new(dir.path())).unwrap();
    let err = Orchestrator::resume(&result.run_dir, RunConfig::new(dir.path())).unwrap_err();
    assert!(matches!(err, RunError::NotResumable { .. }), "{err}");

    let missing = dir.path().join("run-missing");
    let err = Orchestrator::resume(&missing, RunConfig::new(dir.path())).unwrap_err();
    assert!(matches!(err, RunError::NotResumable { .. }), "{err}");
}
