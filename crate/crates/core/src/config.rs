//! Experiment configuration: a TOML file names the task, data files,
//! interpretation method, loss knobs, and schedule for one experiment.
//! Relative paths resolve against the config file's directory. The
//! `UIMER_SEED` environment variable overrides the configured seeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{DmPenalties, FKind};
use crate::loss::{Method, ObjectiveConfig};
use crate::model::{ObjectiveKind, TaskKind};
use crate::replace::StrategyKind;
use crate::schedule::ScheduleConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ic,
    Sf,
    Nli,
}

impl Task {
    pub fn kind(self) -> TaskKind {
        match self {
            Task::Ic => TaskKind::SingleClassification,
            Task::Sf => TaskKind::SequenceLabeling,
            Task::Nli => TaskKind::PairClassification,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Ic => "ic",
            Task::Sf => "sf",
            Task::Nli => "nli",
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Sf => "span_f1",
            _ => "accuracy",
        }
    }
}

/// Which conditional token model backs the bert replacement strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlmKind {
    Counting,
    Tiny,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("parse {path}: {source}")]
    Parse { path: String, source: Box<toml::de::Error> },
    #[error("config: {0}")]
    Invalid(String),
}

fn d_strategy() -> StrategyKind {
    StrategyKind::Uniform
}
fn d_alpha() -> f64 {
    1.0
}
fn d_epsilon() -> f64 {
    1.0
}
fn d_set_size() -> usize {
    8
}
fn d_top_k() -> usize {
    10
}
fn d_mlm() -> MlmKind {
    MlmKind::Counting
}
fn d_smoothing() -> f64 {
    0.5
}
fn d_objective_kind() -> ObjectiveKind {
    ObjectiveKind::GoldLogProb
}
fn d_f_kind() -> FKind {
    FKind::Sum
}
fn d_true() -> bool {
    true
}
fn d_dim() -> usize {
    12
}
fn d_hidden() -> usize {
    8
}
fn d_lambda() -> f64 {
    1.0
}
fn d_temperature() -> f64 {
    0.7
}
fn d_probe_hidden() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    /// Keyword or pattern file for the annotate subcommand; training data
    /// is expected to carry masks already.
    #[serde(default)]
    pub rationale_source: Option<PathBuf>,
    pub method: Method,
    #[serde(default = "d_strategy")]
    pub strategy: StrategyKind,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default = "d_set_size")]
    pub sample_set_size: usize,
    #[serde(default = "d_top_k")]
    pub bert_top_k: usize,
    #[serde(default = "d_mlm")]
    pub mlm: MlmKind,
    #[serde(default = "d_smoothing")]
    pub mlm_smoothing: f64,
    #[serde(default = "d_objective_kind")]
    pub objective_kind: ObjectiveKind,
    #[serde(default = "d_f_kind")]
    pub f_kind: FKind,
    #[serde(default)]
    pub stop_gradient_m: bool,
    #[serde(default = "d_true")]
    pub redraw_non_rationales: bool,
    #[serde(default = "d_dim")]
    pub embedding_dim: usize,
    #[serde(default = "d_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "d_lambda")]
    pub lambda_sparse: f64,
    #[serde(default = "d_lambda")]
    pub lambda_faith: f64,
    #[serde(default = "d_temperature")]
    pub gate_temperature: f64,
    #[serde(default = "d_probe_hidden")]
    pub probe_hidden: usize,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parse a TOML config file, resolve its relative paths against the
    /// file's directory, and validate.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        let mut config: ExperimentConfig = toml::from_str(&text).map_err(|source| {
            ConfigError::Parse { path: path.display().to_string(), source: Box::new(source) }
        })?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut self.train);
        resolve(&mut self.dev);
        resolve(&mut self.test);
        if let Some(rs) = &mut self.rationale_source {
            resolve(rs);
        }
        resolve(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.objective()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.schedule
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let dm_schedule = matches!(
            self.schedule.mode,
            crate::schedule::ScheduleMode::OnePassDm | crate::schedule::ScheduleMode::MultiRoundDm
        );
        if (self.method == Method::Dm) != dm_schedule {
            return Err(ConfigError::Invalid(format!(
                "method {} does not fit schedule mode {:?}: dm trains by alternation, \
                 the other methods train jointly",
                self.method.name(),
                self.schedule.mode
            )));
        }
        if self.embedding_dim == 0 || self.hidden_dim == 0 || self.probe_hidden == 0 {
            return Err(ConfigError::Invalid("model dimensions must be positive".into()));
        }
        if self.gate_temperature <= 0.0 {
            return Err(ConfigError::Invalid("gate_temperature must be positive".into()));
        }
        if self.lambda_sparse < 0.0 || self.lambda_faith < 0.0 {
            return Err(ConfigError::Invalid("penalty weights must be non-negative".into()));
        }
        if self.mlm_smoothing <= 0.0 {
            return Err(ConfigError::Invalid("mlm_smoothing must be positive".into()));
        }
        for (name, p) in
            [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
        {
            if !p.is_file() {
                return Err(ConfigError::Invalid(format!(
                    "{name} dataset not found: {}",
                    p.display()
                )));
            }
        }
        if let Some(rs) = &self.rationale_source {
            if !rs.is_file() {
                return Err(ConfigError::Invalid(format!(
                    "rationale source not found: {}",
                    rs.display()
                )));
            }
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            method: self.method,
            alpha: self.alpha,
            epsilon: self.epsilon,
            f_kind: self.f_kind,
            objective_kind: self.objective_kind,
            strategy: self.strategy,
            set_size: self.sample_set_size,
            stop_gradient_m: self.stop_gradient_m,
            redraw_non_rationales: self.redraw_non_rationales,
        }
    }

    pub fn penalties(&self) -> DmPenalties {
        DmPenalties { lambda_sparse: self.lambda_sparse, lambda_faith: self.lambda_faith }
    }

    /// Replace the configured seeds with a comma-separated list.
    pub fn override_seeds(&mut self, spec: &str) -> Result<(), ConfigError> {
        let seeds: Result<Vec<u64>, _> =
            spec.split(',').map(|s| s.trim().parse::<u64>()).collect();
        match seeds {
            Ok(s) if !s.is_empty() => {
                self.schedule.seeds = s;
                Ok(())
            }
            _ => Err(ConfigError::Invalid(format!(
                "UIMER_SEED must be a comma-separated list of integers, got {spec:?}"
            ))),
        }
    }

    /// Apply the `UIMER_SEED` override if the variable is set. Returns
    /// whether an override happened.
    pub fn apply_env_override(&mut self) -> Result<bool, ConfigError> {
        match std::env::var("UIMER_SEED") {
            Ok(v) => {
                self.override_seeds(&v)?;
                Ok(true)
            }
            Err(_) => Ok(false),
        }
    }
}
