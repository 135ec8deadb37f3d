use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How a configuration is instrumented. The harness itself treats every
/// configuration as an opaque command; this is carried for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instrumentation {
    #[default]
    None,
    Usdt,
    Uprobes,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Configuration {
    pub name: String,
    pub command: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub instrumentation: Instrumentation,
}

impl Configuration {
    pub fn new<S: Into<String>>(name: S, command: Vec<String>) -> Self {
        Configuration {
            name: name.into(),
            command,
            env: BTreeMap::new(),
            instrumentation: Instrumentation::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchPlan {
    pub configurations: Vec<Configuration>,
    pub warmup_runs: u32,
    pub measured_runs: u32,
    #[serde(default)]
    pub pin_core: Option<usize>,
    #[serde(rename = "baseline")]
    pub baseline_name: String,
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("cannot read plan: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid plan: {0}")]
    Json(#[from] serde_json::Error),
    #[error("plan has no configurations")]
    NoConfigurations,
    #[error("measured_runs must be at least 2, got {0}")]
    InsufficientRuns(u32),
    #[error("baseline `{0}` does not name a configuration")]
    UnknownBaseline(String),
    #[error("configuration name `{0}` is used more than once")]
    DuplicateName(String),
    #[error("configuration `{0}` has an empty command")]
    EmptyCommand(String),
}

impl BenchPlan {
    pub fn from_json(text: &str) -> Result<Self, PlanError> {
        let plan: BenchPlan = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self, PlanError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.configurations.is_empty() {
            return Err(PlanError::NoConfigurations);
        }
        if self.measured_runs < 2 {
            return Err(PlanError::InsufficientRuns(self.measured_runs));
        }
        let mut names = HashSet::new();
        for c in &self.configurations {
            if !names.insert(c.name.as_str()) {
                return Err(PlanError::DuplicateName(c.name.clone()));
            }
            if c.command.is_empty() || c.command[0].is_empty() {
                return Err(PlanError::EmptyCommand(c.name.clone()));
            }
        }
        if !names.contains(self.baseline_name.as_str()) {
            return Err(PlanError::UnknownBaseline(self.baseline_name.clone()));
        }
        Ok(())
    }

    pub fn baseline(&self) -> &Configuration {
        self.configurations
            .iter()
            .find(|c| c.name == self.baseline_name)
            .expect("validated plan names its baseline")
    }
}
