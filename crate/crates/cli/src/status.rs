//! `flowgate status`

use std::path::Path;
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use flowgate_api::views::{run_detail, task_list};
use flowgate_core::hitl::list_prompts;
use flowgate_core::rundir::{list_runs, RunDir, RunStatus};
use serde_json::json;

use crate::output::{count_summary, print_json, table, task_table};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Run to show; all runs in the workdir when absent.
    pub run_id: Option<String>,
    /// Redraw whenever the run records new events, until it ends.
    #[arg(long)]
    pub watch: bool,
    /// Seconds between checks with --watch.
    #[arg(long, default_value_t = 1.0)]
    pub interval: f64,
    /// Print the same documents the HTTP API serves.
    #[arg(long)]
    pub json: bool,
}

pub fn run(workdir: &Path, args: &Args) -> anyhow::Result<ExitCode> {
    let Some(id) = &args.run_id else {
        return list(workdir, args.json);
    };
    let run = RunDir::open(workdir, id)?;
    if !args.watch {
        show(&run, args.json)?;
        return Ok(ExitCode::SUCCESS);
    }
    let interval = Duration::from_secs_f64(args.interval.max(0.05));
    let mut last_seen = None;
    loop {
        let overview = run.overview()?;
        if last_seen != Some(overview.last_seq) {
            if last_seen.is_some() && !args.json {
                println!();
            }
            show(&run, args.json)?;
            last_seen = Some(overview.last_seq);
        }
        if overview.status != RunStatus::Running {
            return Ok(ExitCode::SUCCESS);
        }
        thread::sleep(interval);
    }
}

fn list(workdir: &Path, json: bool) -> anyhow::Result<ExitCode> {
    let overviews = list_runs(workdir)?
        .iter()
        .map(RunDir::overview)
        .collect::<Result<Vec<_>, _>>()?;
    if json {
        print_json(&overviews)?;
        return Ok(ExitCode::SUCCESS);
    }
    if overviews.is_empty() {
        println!("no runs in {}", workdir.display());
        return Ok(ExitCode::SUCCESS);
    }
    let rows: Vec<Vec<String>> = overviews
        .iter()
        .map(|o| {
            vec![
                o.id.clone(),
                o.status.to_string(),
                o.started.map(|t| t.format("%Y-%m-%d %H:%M:%S").to_string()).unwrap_or_default(),
                count_summary(&o.counts),
            ]
        })
        .collect();
    println!("{}", table(&["RUN", "STATUS", "STARTED", "INSTANCES"], &rows));
    Ok(ExitCode::SUCCESS)
}

fn show(run: &RunDir, json: bool) -> anyhow::Result<()> {
    let detail = run_detail(run)?;
    let tasks = task_list(run)?;
    if json {
        return print_json(&json!({"run": detail, "tasks": tasks}));
    }
    let o = &detail.overview;
    println!("run {}: {}, {}", o.id, o.status, count_summary(&o.counts));
    println!("{}", task_table(&tasks));
    for prompt in list_prompts(&run.path)? {
        let first = prompt.message.lines().next().unwrap_or_default();
        println!("awaiting decision: {}: {first}", prompt.instance);
    }
    Ok(())
}
