//! JSON shapes served by the API. The CLI's `--json` output uses the same
//! builders, so both surfaces always agree.

use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use flowgate_core::config::load_spec;
use flowgate_core::rundir::{RunDir, RunDirError, RunOverview};
use flowgate_core::{Event, InstanceId, TaskState};
use serde::{Deserialize, Serialize};

/// `GET /runs/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDetail {
    #[serde(flatten)]
    pub overview: RunOverview,
    pub run_dir: PathBuf,
    pub resumed: u32,
    pub finished: Option<DateTime<Utc>>,
    pub wall_time_secs: Option<f64>,
    pub pending_prompts: usize,
}

/// One element of `GET /runs/{id}/tasks`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub id: InstanceId,
    pub base: String,
    pub generation: u32,
    pub state: TaskState,
    /// Execsite of the task's declaration, when the spec is readable.
    pub execsite: Option<String>,
    /// Detail of the instance's latest event.
    pub detail: String,
    pub updated: DateTime<Utc>,
    pub last_seq: u64,
}

pub fn run_detail(run: &RunDir) -> Result<RunDetail, RunDirError> {
    let overview = run.overview()?;
    let info = run.info()?;
    let result = run.result()?;
    Ok(RunDetail {
        overview,
        run_dir: run.path.clone(),
        resumed: info.map_or(0, |i| i.resumed),
        finished: result.as_ref().map(|r| r.finished),
        wall_time_secs: result.map(|r| r.wall_time_secs),
        pending_prompts: flowgate_core::hitl::list_prompts(&run.path)?.len(),
    })
}

/// Instances in registration order with their folded state.
pub fn task_list(run: &RunDir) -> Result<Vec<TaskView>, RunDirError> {
    let (events, states) = run.states()?;
    let sites: BTreeMap<String, String> = run
        .spec_source()
        .ok()
        .and_then(|s| load_spec(&s).ok())
        .map(|spec| spec.tasks.into_iter().map(|(n, t)| (n, t.execsite)).collect())
        .unwrap_or_default();

    let mut order: Vec<InstanceId> = Vec::new();
    let mut last: BTreeMap<InstanceId, &Event> = BTreeMap::new();
    for e in &events {
        if e.from.is_none() {
            order.push(e.instance.clone());
        }
        last.insert(e.instance.clone(), e);
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let latest = last[&id];
            TaskView {
                base: id.base().to_string(),
                generation: id.generation(),
                state: states[&id],
                execsite: sites.get(id.base()).cloned(),
                detail: latest.detail.clone(),
                updated: latest.timestamp,
                last_seq: latest.seq,
                id,
            }
        })
        .collect())
}
