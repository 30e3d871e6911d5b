use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Runtime activation of a declared task: `name#k`, where `k` counts how many
/// times the task has been activated in this run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstanceId {
    base: String,
    generation: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InstanceIdError {
    #[error("instance id has an empty task name")]
    EmptyBase,
    #[error("instance id `{0}` has an invalid generation")]
    BadGeneration(String),
}

impl InstanceId {
    /// Panics if `generation` is zero.
    pub fn new(base: impl Into<String>, generation: u32) -> Self {
        assert!(generation >= 1, "generation starts at 1");
        Self {
            base: base.into(),
            generation,
        }
    }

    pub fn first(base: impl Into<String>) -> Self {
        Self::new(base, 1)
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    /// File-name stem used for markers and per-instance directories.
    pub fn file_stem(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.base, self.generation)
    }
}

impl FromStr for InstanceId {
    type Err = InstanceIdError;

    /// Accepts `name#k`, or a bare `name` meaning generation 1.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (base, generation) = match s.rsplit_once('#') {
            Some((base, gen)) => {
                let generation: u32 = gen
                    .parse()
                    .map_err(|_| InstanceIdError::BadGeneration(s.to_string()))?;
                if generation == 0 {
                    return Err(InstanceIdError::BadGeneration(s.to_string()));
                }
                (base, generation)
            }
            None => (s, 1),
        };
        if base.is_empty() {
            return Err(InstanceIdError::EmptyBase);
        }
        Ok(Self::new(base, generation))
    }
}

impl Serialize for InstanceId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InstanceId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
