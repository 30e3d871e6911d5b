//! `flowgate validate`

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use flowgate_core::config::{parse_spec_with_warnings, SpecError, Warning};
use flowgate_core::{validate_acyclic, WorkflowSpec};
use serde::Serialize;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Workflow file.
    pub path: PathBuf,
    /// Print diagnostics as JSON.
    #[arg(long)]
    pub json: bool,
}

/// One finding, addressed by file, table and key.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostic {
    pub file: String,
    pub severity: &'static str,
    pub code: String,
    pub table: Option<String>,
    pub key: Option<String>,
    pub message: String,
}

impl Diagnostic {
    fn error(file: &Path, e: &SpecError) -> Self {
        let (mut table, mut key) = match e.location() {
            Some(l) => (Some(l.table.clone()), l.key.clone()),
            None => (None, None),
        };
        if let SpecError::MissingField { field, .. } = e {
            if key.is_none() {
                key = Some(field.clone());
            }
        }
        if let SpecError::Cycle { path } = e {
            table = Some("task".into());
            key = path.first().map(|n| format!("{n}.depends_on"));
        }
        // the error text leads with its location, which has its own fields
        let text = e.to_string();
        let message = match e.location() {
            Some(l) => text
                .strip_prefix(&format!("{l}: "))
                .map_or_else(|| text.clone(), str::to_string),
            None => text,
        };
        Self {
            file: file.display().to_string(),
            severity: "error",
            code: e.code().to_string(),
            table,
            key,
            message,
        }
    }

    fn warning(file: &Path, w: &Warning) -> Self {
        Self {
            file: file.display().to_string(),
            severity: "warning",
            code: "UnknownKey".into(),
            table: Some(w.location.table.clone()),
            key: w.location.key.clone(),
            message: w.message.clone(),
        }
    }

    /// `file:table.key: error[Code]: message`
    pub fn line(&self) -> String {
        let location = match (&self.table, &self.key) {
            (Some(t), Some(k)) => format!(":{t}.{k}"),
            (Some(t), None) => format!(":{t}"),
            _ => String::new(),
        };
        format!("{}{location}: {}[{}]: {}", self.file, self.severity, self.code, self.message)
    }
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    file: String,
    ok: bool,
    tasks: usize,
    initially_active: usize,
    execsites: usize,
    diagnostics: &'a [Diagnostic],
}

/// Reads and checks a workflow file. Diagnostics are returned alongside the
/// spec (absent when any of them is an error).
pub fn check(path: &Path) -> anyhow::Result<(String, Option<WorkflowSpec>, Vec<Diagnostic>)> {
    let source = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut diagnostics = Vec::new();
    let spec = match parse_spec_with_warnings(&source) {
        Ok((spec, warnings)) => {
            diagnostics.extend(warnings.iter().map(|w| Diagnostic::warning(path, w)));
            match validate_acyclic(&spec) {
                Ok(()) => Some(spec),
                Err(e) => {
                    diagnostics.push(Diagnostic::error(path, &e));
                    None
                }
            }
        }
        Err(e) => {
            diagnostics.push(Diagnostic::error(path, &e));
            None
        }
    };
    Ok((source, spec, diagnostics))
}

pub fn run(args: &Args) -> anyhow::Result<ExitCode> {
    let (_, spec, diagnostics) = check(&args.path)?;
    if args.json {
        crate::output::print_json(&Report {
            file: args.path.display().to_string(),
            ok: spec.is_some(),
            tasks: spec.as_ref().map_or(0, |s| s.tasks.len()),
            initially_active: spec.as_ref().map_or(0, |s| s.initial_active.len()),
            execsites: spec.as_ref().map_or(0, |s| s.execsites.len()),
            diagnostics: &diagnostics,
        })?;
    } else {
        for d in &diagnostics {
            println!("{}", d.line());
        }
        if let Some(spec) = &spec {
            println!(
                "{}: ok ({} tasks, {} initially active, {} execsites)",
                args.path.display(),
                spec.tasks.len(),
                spec.initial_active.len(),
                spec.execsites.len()
            );
        }
    }
    Ok(if spec.is_some() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
