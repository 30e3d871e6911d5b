//! `flowgate graph`

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::ValueEnum;
use flowgate_core::config::load_spec;
use flowgate_core::dot::to_dot;
use flowgate_core::rundir::RunDir;
use flowgate_core::LiveGraph;

use crate::output::print_json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Dot,
    Json,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Workflow file, or the id of a run in the workdir.
    pub target: String,
    #[arg(long, value_enum, default_value = "dot")]
    pub format: Format,
}

pub fn run(workdir: &Path, args: &Args) -> anyhow::Result<ExitCode> {
    let path = PathBuf::from(&args.target);
    if path.is_file() {
        return from_spec(&path, args.format);
    }
    let run = RunDir::open(workdir, &args.target)?;
    let view = run.graph()?;
    match args.format {
        Format::Json => print_json(&view)?,
        Format::Dot => {
            let graph = LiveGraph::from_view(&view);
            let states = view.nodes.iter().filter_map(|n| Some((n.id.clone(), n.state?))).collect();
            // the saved spec adds the declared-but-inactive tasks
            let spec = run.spec_source().ok().and_then(|s| load_spec(&s).ok());
            print!("{}", to_dot(&graph, &states, spec.as_ref()));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn from_spec(path: &Path, format: Format) -> anyhow::Result<ExitCode> {
    let (_, spec, diagnostics) = crate::validate::check(path)?;
    let Some(spec) = spec else {
        for d in &diagnostics {
            eprintln!("{}", d.line());
        }
        return Ok(ExitCode::FAILURE);
    };
    let graph = LiveGraph::build_initial(&spec);
    match format {
        Format::Dot => print!("{}", to_dot(&graph, &BTreeMap::new(), Some(&spec))),
        Format::Json => print_json(&graph.view(&BTreeMap::new()))?,
    }
    Ok(ExitCode::SUCCESS)
}
