//! The API against live and finished runs, over real HTTP.

use std::fs;
use std::net::SocketAddr;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use flowgate_api::{ApiConfig, Server};
use flowgate_core::graph::GraphView;
use flowgate_core::hitl::PendingPrompt;
use flowgate_core::registry::read_events;
use flowgate_core::rundir::{RunOverview, RunStatus};
use flowgate_core::{parse_spec, run_workflow, Event, Orchestrator, RunConfig, RunHandle};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

fn server(workdir: &Path, token: Option<&str>) -> Server {
    let mut config = ApiConfig::new(workdir);
    config.token = token.map(str::to_string);
    config.decision_timeout = Duration::from_secs(10);
    Server::spawn(SocketAddr::from(([127, 0, 0, 1], 0)), config).unwrap()
}

fn client() -> Client {
    Client::builder().timeout(Duration::from_secs(30)).build().unwrap()
}

fn run_config(workdir: &Path, id: &str) -> RunConfig {
    let mut c = RunConfig::new(workdir);
    c.run_id = Some(id.into());
    c.tick = Duration::from_millis(10);
    c
}

const SINGLE: &str = r#"
[[task]]
name = "inference_task"
command = "echo done > \"$FLOWGATE_OUTPUT_RESULTS\""
output.results = "results.json"
[workflow]
tasks = ["inference_task"]
[execsites."local"]
poll_interval = "20ms"
"#;

const CHECKPOINT: &str = r#"
[[task]]
name = "training_task"
command = "printf 'loss=0.12\n' > \"$FLOWGATE_OUTPUT_METRICS\""
output.metrics = "output/metrics.txt"

[[task]]
name = "hitl_reviewer_evaluation"
command = "modules.cif_core.hitl_review.hitl_epoch_reviewer"
depends_on = ["training_task"]
add_tasks = ["inference_task"]
[task.hitl]
enabled = true
input = "output/metrics.txt"
message = """
Is the model good enough?
"""

[[task]]
name = "inference_task"
command = "true"

[workflow]
tasks = ["training_task", "hitl_reviewer_evaluation"]

[execsites."local"]
poll_interval = "20ms"
"#;

fn start_checkpoint_run(workdir: &Path, id: &str) -> RunHandle {
    let handle = Orchestrator::start(parse_spec(CHECKPOINT).unwrap(), run_config(workdir, id)).unwrap();
    let start = Instant::now();
    while flowgate_core::hitl::list_prompts(&handle.run_dir).unwrap().is_empty() {
        assert!(start.elapsed() < Duration::from_secs(20), "checkpoint never opened");
        thread::sleep(Duration::from_millis(10));
    }
    handle
}

#[test]
fn finished_run_mirrors_the_registry() {
    let dir = tempfile::tempdir().unwrap();
    let result = run_workflow(parse_spec(SINGLE).unwrap(), run_config(dir.path(), "one")).unwrap();
    let server = server(dir.path(), None);
    let http = client();
    let base = server.url();

    let runs: Vec<RunOverview> = http.get(format!("{base}/runs")).send().unwrap().json().unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].id, "one");
    assert_eq!(runs[0].status, RunStatus::Finished);

    let run: Value = http.get(format!("{base}/runs/one")).send().unwrap().json().unwrap();
    assert_eq!(run["status"], "finished");
    assert_eq!(run["instances"], 1);

    let tasks: Vec<Value> = http.get(format!("{base}/runs/one/tasks")).send().unwrap().json().unwrap();
    assert_eq!(tasks.len(), 1);
    assert_eq!(tasks[0]["id"], "inference_task#1");
    assert_eq!(tasks[0]["state"], "Succeeded");
    assert_eq!(tasks[0]["execsite"], "local");

    let graph: GraphView = http.get(format!("{base}/runs/one/graph")).send().unwrap().json().unwrap();
    assert_eq!(graph.nodes.len(), tasks.len());
    assert_eq!(graph.nodes[0].generation, 1);
    assert_eq!(graph.nodes[0].base, "inference_task");

    let events: Vec<Event> = http.get(format!("{base}/runs/one/events?since=0")).send().unwrap().json().unwrap();
    assert_eq!(events, read_events(&result.event_log).unwrap());
    let last = events.last().unwrap().seq;
    let tail: Vec<Event> = http
        .get(format!("{base}/runs/one/events?since={last}&wait=0.2"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert!(tail.is_empty());

    for path in ["/runs/nope", "/runs/nope/tasks", "/runs/nope/graph", "/runs/nope/events", "/runs/nope/prompts"] {
        let resp = http.get(format!("{base}{path}")).send().unwrap();
        assert_eq!(resp.status(), StatusCode::NOT_FOUND, "{path}");
        let body: Value = resp.json().unwrap();
        assert_eq!(body["code"], "NotFound");
    }
    for bad in ["abc", "-1", "1.5"] {
        let resp = http.get(format!("{base}/runs/one/events?since={bad}")).send().unwrap();
        assert_eq!(resp.status(), StatusCode::BAD_REQUEST, "since={bad}");
    }
}

#[test]
fn incremental_fetches_reassemble_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let spec = parse_spec(
        "[[task]]\nname = \"a\"\ncommand = \"sleep 0.2\"\n[[task]]\nname = \"b\"\ncommand = \"sleep 0.2\"\ndepends_on = [\"a\"]\n[workflow]\ntasks = [\"a\", \"b\"]\n[execsites.\"local\"]\npoll_interval = \"20ms\"\n",
    )
    .unwrap();
    let handle = Orchestrator::start(spec, run_config(dir.path(), "stream")).unwrap();
    let server = server(dir.path(), None);
    let http = client();

    let mut seen: Vec<Event> = Vec::new();
    let start = Instant::now();
    loop {
        assert!(start.elapsed() < Duration::from_secs(30));
        let since = seen.last().map_or(0, |e| e.seq);
        let url = format!("{}/runs/stream/events?since={since}&wait=2", server.url());
        let batch: Vec<Event> = http.get(url).send().unwrap().json().unwrap();
        let finished = batch.is_empty() && handle.is_finished();
        seen.extend(batch);
        if finished {
            break;
        }
    }
    let result = handle.wait().unwrap();
    assert_eq!(seen, read_events(&result.event_log).unwrap());
}

#[test]
fn checkpoint_prompt_artifact_and_decisions() {
    let dir = tempfile::tempdir().unwrap();
    let handle = start_checkpoint_run(dir.path(), "hitl");
    let server = server(dir.path(), None);
    let http = client();
    let base = format!("{}/runs/hitl", server.url());
    let reviewer = "hitl_reviewer_evaluation%231";

    let prompts: Vec<PendingPrompt> = http.get(format!("{base}/prompts")).send().unwrap().json().unwrap();
    assert_eq!(prompts.len(), 1);
    assert_eq!(prompts[0].message, "Is the model good enough?\n");
    assert_eq!(prompts[0].add_tasks, ["inference_task"]);

    let resp = http.get(format!("{base}/prompts/{reviewer}/artifact")).send().unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let on_disk = fs::read(handle.run_dir.join("output/metrics.txt")).unwrap();
    assert_eq!(
        resp.headers()[reqwest::header::CONTENT_LENGTH].to_str().unwrap(),
        on_disk.len().to_string()
    );
    assert_eq!(resp.bytes().unwrap().to_vec(), on_disk);
    let resp = http.get(format!("{base}/prompts/training_task%231/artifact")).send().unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);

    let post = |instance: &str, body: Value| http.post(format!("{base}/tasks/{instance}/decision")).json(&body).send().unwrap();

    let resp = post(reviewer, json!({"verdict": "reject", "add_tasks": ["training_task"]}));
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let body: Value = resp.json().unwrap();
    assert_eq!(body["code"], "NotPermitted");
    assert!(body["message"].as_str().unwrap().contains("training_task"));

    let resp = post("training_task%231", json!({"verdict": "approve"}));
    assert_eq!(resp.status(), StatusCode::CONFLICT);
    assert_eq!(resp.json::<Value>().unwrap()["code"], "NotAwaiting");
    assert_eq!(post("ghost%231", json!({"verdict": "approve"})).status(), StatusCode::NOT_FOUND);
    assert_eq!(post(reviewer, json!({"verdict": "perhaps"})).status(), StatusCode::BAD_REQUEST);

    let resp = post(
        reviewer,
        json!({"verdict": "reject", "add_tasks": ["inference_task"], "message": "retry", "actor": "alice"}),
    );
    assert_eq!(resp.status(), StatusCode::OK);
    let body: Value = resp.json().unwrap();
    assert_eq!(body["outcome"]["added"], json!(["inference_task#1"]));
    assert_eq!(body["decision"]["actor"], "alice");

    let before: Vec<Value> = http.get(format!("{base}/tasks")).send().unwrap().json().unwrap();
    let resp = post(reviewer, json!({"verdict": "approve"}));
    assert_eq!(resp.status(), StatusCode::CONFLICT);
    assert_eq!(resp.json::<Value>().unwrap()["code"], "DuplicateDecision");
    let after: Vec<Value> = http.get(format!("{base}/tasks")).send().unwrap().json().unwrap();
    let states = |v: &[Value]| v.iter().map(|t| (t["id"].clone(), t["state"].clone())).collect::<Vec<_>>();
    assert!(states(&after).starts_with(&states(&before)[..2]));

    let prompts: Vec<Value> = http.get(format!("{base}/prompts")).send().unwrap().json().unwrap();
    assert!(prompts.is_empty());
    let resp = http.get(format!("{base}/prompts/{reviewer}/artifact")).send().unwrap();
    assert_eq!(resp.status(), StatusCode::CONFLICT);

    let result = handle.wait().unwrap();
    assert!(result.all_succeeded(), "{:?}", result.states);
    let graph: GraphView = http.get(format!("{base}/graph")).send().unwrap().json().unwrap();
    assert_eq!(graph.nodes.len(), 3);
    assert!(graph.nodes.iter().any(|n| n.id.to_string() == "inference_task#1"));
}

#[test]
fn posts_require_the_token_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    let handle = start_checkpoint_run(dir.path(), "secure");
    let server = server(dir.path(), Some("s3cret"));
    let http = client();
    let url = format!("{}/runs/secure/tasks/hitl_reviewer_evaluation%231/decision", server.url());

    let resp = http.post(&url).json(&json!({"verdict": "approve"})).send().unwrap();
    assert_eq!(resp.status(), StatusCode::UNAUTHORIZED);
    let resp = http.post(&url).bearer_auth("wrong").json(&json!({"verdict": "approve"})).send().unwrap();
    assert_eq!(resp.status(), StatusCode::UNAUTHORIZED);
    // reads stay open
    assert_eq!(http.get(format!("{}/runs/secure", server.url())).send().unwrap().status(), StatusCode::OK);

    let resp = http.post(&url).bearer_auth("s3cret").json(&json!({"verdict": "approve"})).send().unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert!(handle.wait().unwrap().all_succeeded());
}

#[test]
fn decisions_for_finished_runs_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    run_workflow(parse_spec(SINGLE).unwrap(), run_config(dir.path(), "done")).unwrap();
    let server = server(dir.path(), None);
    let resp = client()
        .post(format!("{}/runs/done/tasks/inference_task%231/decision", server.url()))
        .json(&json!({"verdict": "approve"}))
        .send()
        .unwrap();
    assert_eq!(resp.status(), StatusCode::CONFLICT);
    assert_eq!(resp.json::<Value>().unwrap()["code"], "NotAwaiting");
}
