//! Internal handlers for `modules.*` commands, looked up by name at dispatch.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::ids::InstanceId;

pub struct ModuleContext<'a> {
    pub instance: &'a InstanceId,
    pub working_dir: &'a Path,
    pub env: &'a BTreeMap<String, String>,
    pub outputs: &'a BTreeMap<String, PathBuf>,
}

/// An in-process task body. Returns the exit code recorded for the instance.
pub trait ModuleHandler: Send + Sync {
    fn run(&self, ctx: &ModuleContext<'_>) -> i32;
}

impl<F> ModuleHandler for F
where
    F: Fn(&ModuleContext<'_>) -> i32 + Send + Sync,
{
    fn run(&self, ctx: &ModuleContext<'_>) -> i32 {
        self(ctx)
    }
}

#[derive(Clone, Default)]
pub struct ModuleRegistry {
    handlers: BTreeMap<String, Arc<dyn ModuleHandler>>,
}

impl std::fmt::Debug for ModuleRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.handlers.keys()).finish()
    }
}

impl ModuleRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// `modules.builtin.noop`, `modules.builtin.fail` and
    /// `modules.builtin.touch_outputs` (creates every declared output file).
    pub fn with_builtins() -> Self {
        let mut reg = Self::new();
        reg.register("modules.builtin.noop", |_: &ModuleContext<'_>| 0);
        reg.register("modules.builtin.fail", |_: &ModuleContext<'_>| 1);
        reg.register("modules.builtin.touch_outputs", |ctx: &ModuleContext<'_>| {
            for path in ctx.outputs.values() {
                if let Some(parent) = path.parent() {
                    if fs::create_dir_all(parent).is_err() {
                        return 1;
                    }
                }
                if fs::write(path, b"").is_err() {
                    return 1;
                }
            }
            0
        });
        reg
    }

    pub fn register(&mut self, name: impl Into<String>, handler: impl ModuleHandler + 'static) {
        self.handlers.insert(name.into(), Arc::new(handler));
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn ModuleHandler>> {
        self.handlers.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.handlers.keys().map(String::as_str)
    }
}
