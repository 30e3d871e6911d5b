//! Thin adapter for a real SLURM cluster: `sbatch` to submit, `scancel` to
//! cancel, reached over `ssh` when the execsite names a host.
//!
//! The generated job script follows the same marker protocol as every other
//! backend, so the watcher needs nothing SLURM-specific. The status directory
//! must be visible to the coordinator (shared filesystem or a sync job).
//! Commands go through a [`CommandRunner`] so the adapter can be exercised
//! without a cluster.

use std::collections::HashMap;
use std::io::Write;
use std::process::{Command, Stdio};

use thiserror::Error;

use crate::backend::{BackendError, ExecBackend, Submission};
use crate::config::ExecSiteDecl;
use crate::exec_local::{shell_quote, LaunchPlan, PlannedCommand};
use crate::ids::InstanceId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SlurmError {
    #[error("unexpected sbatch output: {0:?}")]
    UnparsableSubmit(String),
    #[error("module commands cannot run on a batch cluster: {0}")]
    ModuleCommand(String),
}

/// Runs an argv with optional stdin, returning (exit code, stdout, stderr).
pub trait CommandRunner: Send {
    fn run(&mut self, argv: &[String], stdin: Option<&str>) -> std::io::Result<(i32, String, String)>;
}

/// Runs commands on this machine.
pub struct ProcessRunner;

impl CommandRunner for ProcessRunner {
    fn run(&mut self, argv: &[String], stdin: Option<&str>) -> std::io::Result<(i32, String, String)> {
        let (program, args) = argv.split_first().expect("argv is never empty");
        let mut child = Command::new(program)
            .args(args)
            .stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() })
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        if let (Some(input), Some(mut pipe)) = (stdin, child.stdin.take()) {
            pipe.write_all(input.as_bytes())?;
        }
        let out = child.wait_with_output()?;
        Ok((
            out.status.code().unwrap_or(-1),
            String::from_utf8_lossy(&out.stdout).into_owned(),
            String::from_utf8_lossy(&out.stderr).into_owned(),
        ))
    }
}

pub struct SlurmBackend {
    /// `ssh -i key user@host` prefix, empty for a local submit host.
    remote: Vec<String>,
    runner: Box<dyn CommandRunner>,
    jobs: HashMap<InstanceId, u64>,
}

/// Extracts the job id from `Submitted batch job N` (or `--parsable` output).
pub fn parse_sbatch_output(stdout: &str) -> Result<u64, SlurmError> {
    let line = stdout.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let token = line
        .strip_prefix("Submitted batch job ")
        .unwrap_or(line)
        .split(';')
        .next()
        .unwrap_or("");
    token
        .trim()
        .parse()
        .map_err(|_| SlurmError::UnparsableSubmit(stdout.to_string()))
}

/// Batch script for a plan: runs the command, then writes the exit file and marker.
pub fn job_script(plan: &LaunchPlan) -> Result<String, SlurmError> {
    let command = match &plan.command {
        PlannedCommand::Shell(c) => c,
        PlannedCommand::Module(m) => return Err(SlurmError::ModuleCommand(m.clone())),
    };
    let q = |p: &std::path::Path| shell_quote(&p.display().to_string());
    let mut script = String::from("#!/bin/sh\n");
    script.push_str(&format!("#SBATCH --job-name={}\n", shell_quote(&plan.instance.to_string())));
    script.push_str(&format!("#SBATCH --output={}\n", q(&plan.stdout_path)));
    script.push_str(&format!("#SBATCH --error={}\n", q(&plan.stderr_path)));
    for (k, v) in &plan.env {
        script.push_str(&format!("export {k}={}\n", shell_quote(v)));
    }
    script.push_str(&format!("mkdir -p {} && cd {}\n", q(&plan.working_dir), q(&plan.working_dir)));
    script.push_str(&format!("sh -c {}\n", shell_quote(command)));
    script.push_str("code=$?\n");
    script.push_str(&format!(
        "printf '%s' \"$code\" > {exit}.tmp && mv {exit}.tmp {exit} && : > {done}\n",
        exit = q(&plan.exit_path),
        done = q(&plan.marker_path)
    ));
    Ok(script)
}

impl SlurmBackend {
    pub fn for_site(site: &ExecSiteDecl) -> Self {
        Self::with_runner(site, Box::new(ProcessRunner))
    }

    pub fn with_runner(site: &ExecSiteDecl, runner: Box<dyn CommandRunner>) -> Self {
        let remote = match &site.host {
            Some(host) => {
                let mut argv = vec!["ssh".to_string(), "-o".into(), "BatchMode=yes".into()];
                if let Some(key) = &site.key {
                    argv.push("-i".into());
                    argv.push(key.clone());
                }
                argv.push(match &site.user {
                    Some(user) => format!("{user}@{host}"),
                    None => host.clone(),
                });
                argv
            }
            None => Vec::new(),
        };
        Self {
            remote,
            runner,
            jobs: HashMap::new(),
        }
    }

    fn argv(&self, command: &[&str]) -> Vec<String> {
        if self.remote.is_empty() {
            command.iter().map(|s| s.to_string()).collect()
        } else {
            let mut argv = self.remote.clone();
            argv.push(command.iter().map(|s| shell_quote(s)).collect::<Vec<_>>().join(" "));
            argv
        }
    }
}

impl ExecBackend for SlurmBackend {
    fn strategy(&self) -> &str {
        "slurm"
    }

    fn submit(&mut self, plan: &LaunchPlan) -> Result<Submission, BackendError> {
        let script = job_script(plan).map_err(|e| BackendError::Spawn(e.to_string()))?;
        let argv = self.argv(&["sbatch"]);
        let (code, stdout, stderr) = self
            .runner
            .run(&argv, Some(&script))
            .map_err(|e| BackendError::Spawn(e.to_string()))?;
        if code != 0 {
            return Err(BackendError::Spawn(format!("sbatch exited {code}: {}", stderr.trim())));
        }
        let job_id = parse_sbatch_output(&stdout).map_err(|e| BackendError::Spawn(e.to_string()))?;
        self.jobs.insert(plan.instance.clone(), job_id);
        Ok(Submission {
            handle: format!("job {job_id}"),
            started: false,
        })
    }

    fn cancel(&mut self, instance: &InstanceId) -> Result<(), BackendError> {
        let job_id = self
            .jobs
            .get(instance)
            .ok_or_else(|| BackendError::UnknownJob(instance.clone()))?
            .to_string();
        let argv = self.argv(&["scancel", &job_id]);
        let (code, _, stderr) = self.runner.run(&argv, None)?;
        if code != 0 {
            return Err(BackendError::Spawn(format!("scancel exited {code}: {}", stderr.trim())));
        }
        Ok(())
    }

    fn adopt(&mut self, instance: &InstanceId, handle: &str) -> bool {
        match handle.strip_prefix("job ").and_then(|j| j.parse().ok()) {
            Some(job_id) => {
                self.jobs.insert(instance.clone(), job_id);
                true
            }
            None => false,
        }
    }

    fn describe(&self, instance: &InstanceId) -> Option<String> {
        self.jobs.get(instance).map(|j| format!("job {j}"))
    }
}
