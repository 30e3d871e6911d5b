//! `flowgate decide`

use std::path::Path;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use flowgate_api::{ApiError, DecisionResponse, TOKEN_ENV};
use flowgate_core::hitl::{DecisionError, ParamOverrides};
use flowgate_core::rundir::{self, RunDir};
use flowgate_core::{Decision, InstanceId, Verdict};
use serde_json::{json, Value};

use crate::output::print_json;

#[derive(Debug, clap::Args)]
#[command(group(clap::ArgGroup::new("verdict").required(true).args(["approve", "reject", "abort"])))]
pub struct Args {
    /// Run holding the checkpoint.
    pub run_id: String,
    /// Checkpoint instance, e.g. `hitl_reviewer_evaluation#1`.
    pub instance: InstanceId,
    #[arg(long)]
    pub approve: bool,
    #[arg(long)]
    pub reject: bool,
    /// Fail the checkpoint and cancel everything downstream of it.
    #[arg(long)]
    pub abort: bool,
    /// Task to add (must be listed in the checkpoint's add_tasks); repeatable.
    #[arg(long = "add-task", value_name = "TASK")]
    pub add_tasks: Vec<String>,
    /// Parameter override for an added task; repeatable.
    #[arg(long = "set", value_name = "TASK.KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, String, String)>,
    /// Pending instance to cancel as no longer needed; repeatable.
    #[arg(long = "skip", value_name = "INSTANCE")]
    pub skip: Vec<InstanceId>,
    #[arg(long, short, default_value = "")]
    pub message: String,
    /// Recorded as the decision's author; defaults to $USER.
    #[arg(long)]
    pub actor: Option<String>,
    /// Submit to a status API at this base URL instead of the local workdir.
    #[arg(long, value_name = "URL")]
    pub remote: Option<String>,
    /// Bearer token for --remote.
    #[arg(long, env = TOKEN_ENV, hide_env_values = true)]
    pub token: Option<String>,
    /// Seconds to wait for the coordinator to apply the decision.
    #[arg(long, default_value_t = 30.0)]
    pub timeout: f64,
    #[arg(long)]
    pub json: bool,
}

fn parse_override(s: &str) -> Result<(String, String, String), String> {
    let (target, value) = s.split_once('=').ok_or("expected TASK.KEY=VALUE")?;
    let (task, key) = target.split_once('.').ok_or("expected TASK.KEY=VALUE")?;
    if task.is_empty() || key.is_empty() {
        return Err("expected TASK.KEY=VALUE".into());
    }
    Ok((task.to_string(), key.to_string(), value.to_string()))
}

impl Args {
    fn decision(&self) -> Decision {
        let verdict = if self.approve {
            Verdict::Approve
        } else if self.reject {
            Verdict::Reject
        } else {
            Verdict::Abort
        };
        let mut decision = Decision::new(self.instance.clone(), verdict);
        decision.add_tasks = self.add_tasks.clone();
        let mut overrides = ParamOverrides::new();
        for (task, key, value) in &self.overrides {
            overrides
                .entry(task.clone())
                .or_default()
                .insert(key.clone(), Value::String(value.clone()));
        }
        decision.param_overrides = overrides;
        decision.skip = self.skip.clone();
        decision.message = self.message.clone();
        decision.actor = self
            .actor
            .clone()
            .or_else(|| std::env::var("USER").ok())
            .unwrap_or_default();
        decision
    }
}

/// A refusal, as the API reports it.
struct Refusal {
    code: String,
    message: String,
    detail: Value,
}

impl From<DecisionError> for Refusal {
    fn from(e: DecisionError) -> Self {
        let detail = serde_json::to_value(&e).ok().and_then(|v| v.get("detail").cloned()).unwrap_or(Value::Null);
        Self {
            code: e.code().to_string(),
            message: e.to_string(),
            detail,
        }
    }
}

pub fn run(workdir: &Path, args: &Args) -> anyhow::Result<ExitCode> {
    let decision = args.decision();
    let timeout = Duration::from_secs_f64(args.timeout.max(0.0));
    let result = match &args.remote {
        Some(url) => remote(url, &args.run_id, &decision, args.token.as_deref(), timeout)?,
        None => {
            let run = RunDir::open(workdir, &args.run_id)?;
            rundir::decide(&run, &decision, timeout)
                .map(|outcome| DecisionResponse {
                    decision: decision.clone(),
                    outcome,
                })
                .map_err(Refusal::from)
        }
    };
    match result {
        Ok(response) => {
            if args.json {
                print_json(&response)?;
            } else {
                let o = &response.outcome;
                let mut line = format!("{}: {} ({})", o.instance, o.state, o.verdict);
                if !o.added.is_empty() {
                    let added: Vec<String> = o.added.iter().map(ToString::to_string).collect();
                    line.push_str(&format!("; added {}", added.join(", ")));
                }
                if !o.skipped.is_empty() {
                    let skipped: Vec<String> = o.skipped.iter().map(ToString::to_string).collect();
                    line.push_str(&format!("; skipped {}", skipped.join(", ")));
                }
                println!("{line}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(r) => {
            if args.json {
                print_json(&json!({"code": r.code, "message": r.message, "detail": r.detail}))?;
            }
            eprintln!("error: {}: {}", r.code, r.message);
            Ok(ExitCode::FAILURE)
        }
    }
}

/// POSTs the decision; transport failures are errors, API refusals are
/// returned as [`Refusal`]s.
fn remote(
    base: &str,
    run_id: &str,
    decision: &Decision,
    token: Option<&str>,
    timeout: Duration,
) -> anyhow::Result<Result<DecisionResponse, Refusal>> {
    let url = format!(
        "{}/runs/{run_id}/tasks/{}/decision",
        base.trim_end_matches('/'),
        decision.instance.to_string().replace('#', "%23")
    );
    let client = reqwest::blocking::Client::builder()
        .timeout(timeout + Duration::from_secs(10))
        .build()?;
    let mut request = client.post(&url).json(decision);
    if let Some(token) = token {
        request = request.bearer_auth(token);
    }
    let response = request.send().with_context(|| format!("cannot reach {url}"))?;
    let status = response.status();
    if status.is_success() {
        return Ok(Ok(response.json().context("malformed decision response")?));
    }
    let body = response.text().unwrap_or_default();
    let error: ApiError =
        serde_json::from_str(&body).map_err(|_| anyhow!("{url} answered {status}: {}", body.trim()))?;
    Ok(Err(Refusal {
        code: error.code,
        message: error.message,
        detail: error.detail,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_split_at_the_first_dot_and_equals() {
        assert_eq!(
            parse_override("train.output.model=a=b.pt").unwrap(),
            ("train".into(), "output.model".into(), "a=b.pt".into())
        );
        assert!(parse_override("train=x").is_err());
        assert!(parse_override(".k=v").is_err());
    }
}
