//! `flowgate run`, `flowgate resume` and `flowgate serve`.

use std::fs::{self, File};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use flowgate_api::views::{run_detail, task_list};
use flowgate_api::{ApiConfig, Server, DEFAULT_ADDR};
use flowgate_core::hitl::read_prompt;
use flowgate_core::registry::EVENTS_FILE;
use flowgate_core::rundir::{self, RunDir};
use flowgate_core::{Event, Orchestrator, RunConfig, RunHandle, RunResult, TaskState};
use serde_json::json;

use crate::output::{event_line, state_counts, task_table};
use crate::EXIT_RUN_FAILED;

/// Name of the log a detached coordinator writes inside its run directory.
pub const COORDINATOR_LOG: &str = "coordinator.log";

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Return once the run has started; the coordinator keeps going in the
    /// background and logs to `coordinator.log` in the run directory.
    #[arg(long)]
    pub detach: bool,
    /// Seed for every simulated batch site.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also serve the HTTP status API while the run lasts.
    #[arg(long, value_name = "ADDR")]
    pub serve: Option<SocketAddr>,
    /// Stream events as JSON lines and finish with the run as JSON.
    #[arg(long)]
    pub json: bool,
    /// Do not stream events; print only the final table.
    #[arg(long, short)]
    pub quiet: bool,
    /// Concurrent instances on local sites.
    #[arg(long)]
    pub max_local: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// Workflow file.
    pub path: PathBuf,
    /// Run id; generated when absent.
    #[arg(long)]
    pub run_id: Option<String>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, clap::Args)]
pub struct ResumeArgs {
    /// Run to continue.
    pub run_id: String,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, clap::Args)]
pub struct ServeArgs {
    /// Listen address.
    #[arg(long, default_value = DEFAULT_ADDR)]
    pub addr: SocketAddr,
}

pub fn run(workdir: &Path, args: &RunArgs) -> anyhow::Result<ExitCode> {
    let (source, spec, diagnostics) = crate::validate::check(&args.path)?;
    let Some(spec) = spec else {
        for d in &diagnostics {
            eprintln!("{}", d.line());
        }
        return Ok(ExitCode::FAILURE);
    };
    let run_id = args.run_id.clone().unwrap_or_else(rundir::new_run_id);
    if !rundir::valid_run_id(&run_id) {
        bail!("invalid run id `{run_id}`");
    }
    if args.common.detach {
        let path = fs::canonicalize(&args.path)?;
        let mut child_args = vec!["run".into(), path.display().to_string(), "--run-id".into(), run_id.clone()];
        child_args.extend(forwarded(&args.common));
        return detach(workdir, &run_id, child_args);
    }
    let config = run_config(workdir, &run_id, &args.common, Some(source));
    let handle = Orchestrator::start(spec, config)?;
    follow(workdir, handle, &args.common)
}

pub fn resume(workdir: &Path, args: &ResumeArgs) -> anyhow::Result<ExitCode> {
    let run = RunDir::open(workdir, &args.run_id)?;
    if args.common.detach {
        let mut child_args = vec!["resume".into(), run.id.clone()];
        child_args.extend(forwarded(&args.common));
        return detach(workdir, &run.id, child_args);
    }
    let config = run_config(workdir, &run.id, &args.common, None);
    let handle = Orchestrator::resume(&run.path, config)?;
    follow(workdir, handle, &args.common)
}

pub fn serve(workdir: &Path, args: &ServeArgs) -> anyhow::Result<ExitCode> {
    let server = Server::spawn(args.addr, ApiConfig::new(workdir))
        .with_context(|| format!("cannot listen on {}", args.addr))?;
    println!("serving {} on {}", workdir.display(), server.url());
    server.wait()?;
    Ok(ExitCode::SUCCESS)
}

fn forwarded(common: &Common) -> Vec<String> {
    let mut args = vec!["--quiet".to_string()];
    if let Some(seed) = common.seed {
        args.extend(["--seed".into(), seed.to_string()]);
    }
    if let Some(addr) = common.serve {
        args.extend(["--serve".into(), addr.to_string()]);
    }
    if let Some(n) = common.max_local {
        args.extend(["--max-local".into(), n.to_string()]);
    }
    args
}

/// Re-executes this binary as a background coordinator in its own process
/// group and waits until the run directory has an event log.
fn detach(workdir: &Path, run_id: &str, args: Vec<String>) -> anyhow::Result<ExitCode> {
    use std::os::unix::process::CommandExt;

    fs::create_dir_all(workdir)?;
    let workdir = fs::canonicalize(workdir)?;
    let run_dir = rundir::run_dir(&workdir, run_id);
    fs::create_dir_all(&run_dir)?;
    let log_path = run_dir.join(COORDINATOR_LOG);
    let log = File::options().create(true).append(true).open(&log_path)?;
    let mut child = Command::new(std::env::current_exe()?)
        .arg("--workdir")
        .arg(&workdir)
        .args(&args)
        .stdin(Stdio::null())
        .stdout(log.try_clone()?)
        .stderr(log)
        .process_group(0)
        .spawn()
        .context("cannot start the background coordinator")?;

    let start = Instant::now();
    let started = |p: &Path| p.join(EVENTS_FILE).exists();
    let resuming = args.first().is_some_and(|a| a == "resume");
    loop {
        if let Some(status) = child.try_wait()? {
            if status.success() && started(&run_dir) {
                break;
            }
            let log = fs::read_to_string(&log_path).unwrap_or_default();
            bail!("background coordinator exited with {status}:\n{}", log.trim_end());
        }
        // a resumed run already has a log; its run.json pid tells us the
        // child took over
        let ready = if resuming {
            RunDir::open(&workdir, run_id)?.info()?.is_some_and(|i| i.pid == child.id())
        } else {
            started(&run_dir)
        };
        if ready {
            break;
        }
        if start.elapsed() > Duration::from_secs(30) {
            bail!("background coordinator did not start within 30 s; see {}", log_path.display());
        }
        thread::sleep(Duration::from_millis(20));
    }
    println!("{run_id}");
    Ok(ExitCode::SUCCESS)
}

fn run_config(workdir: &Path, run_id: &str, common: &Common, source: Option<String>) -> RunConfig {
    let mut config = RunConfig::new(workdir);
    config.run_id = Some(run_id.to_string());
    config.seed = common.seed;
    config.spec_source = source;
    if let Some(n) = common.max_local {
        config.max_local = n.max(1);
    }
    if !common.quiet {
        let run_dir = rundir::run_dir(workdir, run_id);
        let json = common.json;
        let observer = move |e: &Event| print_event(&run_dir, run_id_of(&run_dir), e, json);
        config.observer = Some(Arc::new(observer));
    }
    config
}

fn run_id_of(run_dir: &Path) -> &str {
    run_dir
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix("run-"))
        .unwrap_or_default()
}

fn print_event(run_dir: &Path, run_id: &str, e: &Event, json: bool) {
    if json {
        if let Ok(line) = serde_json::to_string(e) {
            println!("{line}");
        }
        return;
    }
    println!("{}", event_line(e));
    if e.to == TaskState::AwaitingDecision {
        if let Ok(Some(prompt)) = read_prompt(run_dir, &e.instance) {
            for line in prompt.message.trim_end().lines() {
                println!("     | {line}");
            }
            let adds = if prompt.add_tasks.is_empty() {
                String::new()
            } else {
                format!(" [--add-task {}]", prompt.add_tasks.join("|"))
            };
            println!(
                "     > flowgate decide {run_id} {} --approve | --reject{adds} | --abort",
                e.instance
            );
        }
    }
}

/// Waits for the run (serving the API meanwhile when asked) and prints the
/// final table.
fn follow(workdir: &Path, handle: RunHandle, common: &Common) -> anyhow::Result<ExitCode> {
    let mut server = match common.serve {
        Some(addr) => {
            let server = Server::spawn(addr, ApiConfig::new(workdir))
                .with_context(|| format!("cannot listen on {addr}"))?;
            if !common.json {
                eprintln!("status API on {}", server.url());
            }
            Some(server)
        }
        None => None,
    };
    if !common.json {
        println!("run {} in {}", handle.run_id, handle.run_dir.display());
    }
    let result = handle.wait();
    if let Some(server) = server.as_mut() {
        server.stop();
    }
    let result = result?;
    report(workdir, &result, common.json)?;
    Ok(if result.all_succeeded() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_RUN_FAILED)
    })
}

fn report(workdir: &Path, result: &RunResult, json: bool) -> anyhow::Result<()> {
    let run = RunDir::open(workdir, &result.run_id)?;
    if json {
        let body = json!({"run": run_detail(&run)?, "tasks": task_list(&run)?});
        println!("{}", serde_json::to_string(&body)?);
        return Ok(());
    }
    println!();
    println!("{}", task_table(&task_list(&run)?));
    println!();
    println!(
        "run {} finished in {:.1} s: {}",
        result.run_id,
        result.wall_time.as_secs_f64(),
        state_counts(&result.states)
    );
    Ok(())
}
