//! Execution strategies.
//!
//! Every execsite is served by an [`ExecBackend`] created from a factory in a
//! [`BackendRegistry`]. The strategy name comes from the execsite's `backend`
//! key when present, otherwise from its kind. Backends never report
//! completion directly: finished tasks leave `.done` markers in the site's
//! status directory and the watcher picks them up.

use std::collections::BTreeMap;
use std::io;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

use crate::batch_sim::{BatchSim, SimError};
use crate::config::{ExecSiteDecl, SiteKind};
use crate::exec_local::{LaunchPlan, LocalExecutor};
use crate::ids::InstanceId;
use crate::modules::ModuleRegistry;
use crate::slurm::SlurmBackend;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Submission {
    /// Human-readable backend handle, e.g. `pid 4242` or `job 7`.
    pub handle: String,
    /// True when the task is already executing (no queueing stage).
    pub started: bool,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("failed to start command: {0}")]
    Spawn(String),
    #[error("unknown module `{0}`")]
    UnknownModule(String),
    #[error("queue is full")]
    QueueFull,
    #[error("backend is shut down")]
    Shutdown,
    #[error("no job for instance {0}")]
    UnknownJob(InstanceId),
    #[error("no backend strategy registered as `{0}`")]
    UnknownStrategy(String),
    #[error("{0}")]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub trait ExecBackend: Send {
    /// Strategy name this backend was registered under.
    fn strategy(&self) -> &str;

    /// Starts or enqueues the plan. Must return promptly.
    fn submit(&mut self, plan: &LaunchPlan) -> Result<Submission, BackendError>;

    /// Submits several plans as one step, so backends that model time can
    /// give them the same submission instant.
    fn submit_all(&mut self, plans: &[LaunchPlan]) -> Vec<Result<Submission, BackendError>> {
        plans.iter().map(|p| self.submit(p)).collect()
    }

    fn cancel(&mut self, instance: &InstanceId) -> Result<(), BackendError>;

    /// Takes over an instance launched by an earlier coordinator process.
    /// Returns false when the backend cannot track it.
    fn adopt(&mut self, _instance: &InstanceId, _handle: &str) -> bool {
        false
    }

    /// Backend-side state of the instance's job, for display.
    fn describe(&self, _instance: &InstanceId) -> Option<String> {
        None
    }

    fn shutdown(&mut self) {}
}

/// Shared inputs handed to backend factories.
#[derive(Clone, Debug)]
pub struct BackendContext {
    pub run_dir: PathBuf,
    pub modules: Arc<ModuleRegistry>,
    /// Replaces every batch site's configured seed.
    pub seed_override: Option<u64>,
}

pub type BackendFactory =
    Arc<dyn Fn(&ExecSiteDecl, &BackendContext) -> Result<Box<dyn ExecBackend>, BackendError> + Send + Sync>;

#[derive(Clone)]
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl std::fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl Default for BackendRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// `local`, `batch_sim` and `slurm`.
    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register("local", |_site, ctx| {
            Ok(Box::new(LocalExecutor::new(ctx.modules.clone())) as Box<dyn ExecBackend>)
        });
        reg.register("batch_sim", |site, ctx| {
            let mut settings = site.batch.clone();
            if let Some(seed) = ctx.seed_override {
                settings.seed = seed;
            }
            let sim = BatchSim::start(settings, ctx.modules.clone());
            Ok(Box::new(crate::batch_sim::BatchSimBackend::new(sim)) as Box<dyn ExecBackend>)
        });
        reg.register("slurm", |site, _ctx| {
            Ok(Box::new(SlurmBackend::for_site(site)) as Box<dyn ExecBackend>)
        });
        reg
    }

    pub fn register<F>(&mut self, name: impl Into<String>, factory: F)
    where
        F: Fn(&ExecSiteDecl, &BackendContext) -> Result<Box<dyn ExecBackend>, BackendError>
            + Send
            + Sync
            + 'static,
    {
        self.factories.insert(name.into(), Arc::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    /// Strategy selected for a site.
    pub fn strategy_for(site: &ExecSiteDecl) -> &str {
        if let Some(b) = &site.backend {
            return b;
        }
        match site.kind {
            SiteKind::Local => "local",
            // remote sites are simulated unless a real adapter is requested
            SiteKind::BatchSim | SiteKind::RemoteBatch => "batch_sim",
        }
    }

    pub fn create(&self, site: &ExecSiteDecl, ctx: &BackendContext) -> Result<Box<dyn ExecBackend>, BackendError> {
        let name = Self::strategy_for(site);
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| BackendError::UnknownStrategy(name.to_string()))?;
        factory(site, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Null;

    impl ExecBackend for Null {
        fn strategy(&self) -> &str {
            "null"
        }
        fn submit(&mut self, _plan: &LaunchPlan) -> Result<Submission, BackendError> {
            Ok(Submission {
                handle: "none".into(),
                started: false,
            })
        }
        fn cancel(&mut self, _instance: &InstanceId) -> Result<(), BackendError> {
            Ok(())
        }
    }

    fn ctx() -> BackendContext {
        BackendContext {
            run_dir: PathBuf::from("/tmp"),
            modules: Arc::new(ModuleRegistry::with_builtins()),
            seed_override: None,
        }
    }

    #[test]
    fn kind_selects_default_strategy() {
        let mut site = ExecSiteDecl::with_defaults("x", SiteKind::RemoteBatch);
        assert_eq!(BackendRegistry::strategy_for(&site), "batch_sim");
        site.backend = Some("slurm".into());
        assert_eq!(BackendRegistry::strategy_for(&site), "slurm");
        assert_eq!(BackendRegistry::strategy_for(&ExecSiteDecl::implicit_local()), "local");
    }

    #[test]
    fn custom_strategies_register_by_name() {
        let mut reg = BackendRegistry::with_builtins();
        reg.register("null", |_, _| Ok(Box::new(Null) as Box<dyn ExecBackend>));
        let mut site = ExecSiteDecl::with_defaults("x", SiteKind::BatchSim);
        site.backend = Some("null".into());
        let backend = reg.create(&site, &ctx()).unwrap();
        assert_eq!(backend.strategy(), "null");

        site.backend = Some("missing".into());
        assert!(matches!(reg.create(&site, &ctx()), Err(BackendError::UnknownStrategy(_))));
    }
}
