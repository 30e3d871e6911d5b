//! Workflow engine for declaratively specified task graphs that span local
//! machines and batch clusters, with human-in-the-loop checkpoints that pause
//! only their own branch.
//!
//! Module map:
//!
//! - [`config`]: TOML workflow dialect → [`config::WorkflowSpec`]
//! - [`graph`]: live dependency graph over task instances
//! - [`registry`]: per-instance state machine and append-only event log
//! - [`backend`]: execution strategies, registered by name and selected per execsite
//! - [`exec_local`], [`batch_sim`], [`slurm`]: the built-in strategies
//! - [`watcher`]: polls status directories for `.done` markers
//! - [`hitl`]: checkpoint prompts and supervisor decisions
//! - [`orchestrator`]: the coordination loop
//! - [`rundir`]: on-disk run layout shared by the CLI and the HTTP API

pub mod backend;
pub mod batch_sim;
pub mod config;
pub mod dot;
pub mod exec_local;
pub mod graph;
pub mod hitl;
pub mod ids;
pub mod modules;
pub mod orchestrator;
pub mod registry;
pub mod rundir;
pub mod slurm;
pub mod watcher;

mod fsutil;

pub use config::{parse_spec, validate_acyclic, WorkflowSpec};
pub use graph::LiveGraph;
pub use hitl::{Decision, Verdict};
pub use ids::InstanceId;
pub use orchestrator::{run_workflow, Orchestrator, RunConfig, RunHandle, RunResult};
pub use registry::{Event, JobRegistry, TaskState};
