//! `flowgate`: validate, run, inspect and steer workflows from a terminal.
//!
//! Exit codes: 0 success; 1 any error (invalid workflow, unknown run,
//! refused decision); 2 usage error; 3 a run finished with instances that
//! did not succeed.

mod decide;
mod graph;
mod output;
mod run;
mod status;
mod validate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowgate_core::rundir::{default_workdir, WORKDIR_ENV};

/// Exit code of a run that finished with Failed or Cancelled instances.
pub const EXIT_RUN_FAILED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "flowgate", version, about = "Workflow engine with human-in-the-loop checkpoints")]
struct Cli {
    /// Directory holding run directories.
    #[arg(long, global = true, env = WORKDIR_ENV)]
    workdir: Option<PathBuf>,

    /// More log output (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a workflow file without running it.
    Validate(validate::Args),
    /// Start a run of a workflow file.
    Run(run::RunArgs),
    /// Continue an interrupted run.
    Resume(run::ResumeArgs),
    /// Show runs, or the instances of one run.
    Status(status::Args),
    /// Answer a checkpoint that awaits a decision.
    Decide(decide::Args),
    /// Render the graph of a workflow file or of a run.
    Graph(graph::Args),
    /// Serve the HTTP status API for the workdir.
    Serve(run::ServeArgs),
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default))
        .format_timestamp_millis()
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let workdir = cli.workdir.unwrap_or_else(default_workdir);
    let result = match cli.command {
        Command::Validate(args) => validate::run(&args),
        Command::Run(args) => run::run(&workdir, &args),
        Command::Resume(args) => run::resume(&workdir, &args),
        Command::Status(args) => status::run(&workdir, &args),
        Command::Decide(args) => decide::run(&workdir, &args),
        Command::Graph(args) => graph::run(&workdir, &args),
        Command::Serve(args) => run::serve(&workdir, &args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
