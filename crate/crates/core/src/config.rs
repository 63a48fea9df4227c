//! Run configuration files (TOML) and their resolution into a
//! [`TrainSetup`].

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{Dataset, Model, ModelKind, ModelSpec, OptimizerConfig};
use crate::policy::PolicySpec;
use crate::schedule::{RuleSource, ScheduleRule};
use crate::sim::HeterogeneityProfile;
use crate::topology::NodeMap;
use crate::trainer::{AlgorithmKind, Termination, TrainSetup};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
}

impl ConfigError {
    pub fn field(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Field {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

/// A complete run description, as written in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub algorithm: AlgorithmKind,
    #[serde(default = "one")]
    pub section_length: u64,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_cooldown")]
    pub cooldown_rounds: usize,
    #[serde(default = "yes")]
    pub trace: bool,
    pub topology: TopologyConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub termination: Termination,
    #[serde(default)]
    pub coordinator: CoordinatorConfig,
    #[serde(default)]
    pub schedule: Option<RuleSource>,
    #[serde(default)]
    pub profile: HeterogeneityProfile,
    #[serde(default)]
    pub straggler: Option<StragglerConfig>,
    #[serde(default)]
    pub sweep: Option<SweepAxes>,
}

fn one() -> u64 {
    1
}
fn yes() -> bool {
    true
}
fn default_group_size() -> usize {
    3
}
fn default_eval_every() -> u64 {
    10
}
fn default_cooldown() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum TopologyConfig {
    Uniform { nodes: usize, per_node: usize },
    Assignment { assignment: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    Quadratic,
    LogisticRegression,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelChoice,
    pub input_dim: usize,
    #[serde(default)]
    pub l2: f64,
    /// Hidden width; only for `mlp`.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub init_scale: f64,
    #[serde(default)]
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// Quadratic centers; the evaluation set is the training set.
    SyntheticQuadratic {
        samples: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default = "one")]
        seed: u64,
    },
    SyntheticClassification {
        train_samples: usize,
        eval_samples: usize,
        #[serde(default)]
        label_noise: f64,
        #[serde(default = "one")]
        seed: u64,
    },
    /// CSV files with a header row and the label in the last column.
    Csv {
        path: PathBuf,
        #[serde(default)]
        eval_path: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinatorConfig {
    /// Slowdown-filter threshold in iterations; 0 disables the filter.
    #[serde(default = "default_c_thres")]
    pub c_thres: Option<u64>,
    #[serde(default)]
    pub inter_intra: bool,
    #[serde(default = "default_cache")]
    pub cache_capacity: usize,
}

fn default_c_thres() -> Option<u64> {
    Some(4)
}
fn default_cache() -> usize {
    64
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        CoordinatorConfig {
            c_thres: default_c_thres(),
            inter_intra: false,
            cache_capacity: default_cache(),
        }
    }
}

/// Shorthand for a profile where a few workers are slower by `factor`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StragglerConfig {
    pub factor: f64,
    /// Defaults to the last worker.
    #[serde(default)]
    pub workers: Option<Vec<usize>>,
}

/// Sweep axes; an absent axis keeps the base config's value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default)]
    pub algorithms: Vec<AlgorithmKind>,
    #[serde(default)]
    pub slowdowns: Vec<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub section_lengths: Vec<u64>,
    #[serde(default = "default_baseline")]
    pub baseline: AlgorithmKind,
}

fn default_baseline() -> AlgorithmKind {
    AlgorithmKind::CentralizedPs
}

impl Default for SweepAxes {
    fn default() -> Self {
        SweepAxes {
            algorithms: Vec::new(),
            slowdowns: Vec::new(),
            seeds: Vec::new(),
            section_lengths: Vec::new(),
            baseline: default_baseline(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        RunConfig::from_toml_str(&read(path)?, base_dir(path))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataConfig::Csv { path, eval_path } = &mut self.data {
            fix(path);
            if let Some(p) = eval_path {
                fix(p);
            }
        }
        if let Some(RuleSource::FromFile { path }) = &mut self.schedule {
            fix(path);
        }
    }

    pub fn node_map(&self) -> Result<NodeMap, ConfigError> {
        match &self.topology {
            TopologyConfig::Uniform { nodes, per_node } => {
                if *nodes == 0 || *per_node == 0 {
                    return Err(ConfigError::field("topology", "nodes and per_node must be positive"));
                }
                Ok(NodeMap::uniform(*nodes, *per_node))
            }
            TopologyConfig::Assignment { assignment } => NodeMap::from_assignment(assignment.clone())
                .map_err(|e| ConfigError::field("topology.assignment", e.to_string())),
        }
    }

    pub fn workers(&self) -> Result<usize, ConfigError> {
        Ok(self.node_map()?.workers())
    }

    /// Hex prefix of the SHA-256 of the canonical JSON form, ignoring the
    /// seed and the sweep axes.
    pub fn config_hash(&self) -> String {
        let mut base = self.clone();
        base.seed = 0;
        base.sweep = None;
        let value = serde_json::to_value(&base).expect("config serializes");
        let digest = Sha256::digest(value.to_string().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn run_id(&self) -> String {
        format!("{}-s{}", self.config_hash(), self.seed)
    }

    fn profile(&self, n: usize) -> Result<HeterogeneityProfile, ConfigError> {
        let mut profile = self.profile.clone();
        if let Some(s) = &self.straggler {
            if !profile.slowdown.is_empty() {
                return Err(ConfigError::field(
                    "straggler",
                    "cannot be combined with an explicit profile.slowdown list",
                ));
            }
            if !(s.factor.is_finite() && s.factor > 0.0) {
                return Err(ConfigError::field("straggler.factor", "must be positive"));
            }
            let slow = s.workers.clone().unwrap_or_else(|| vec![n - 1]);
            profile.slowdown = vec![1.0; n];
            for w in slow {
                if w >= n {
                    return Err(ConfigError::field(
                        "straggler.workers",
                        format!("worker {w} out of range for {n} workers"),
                    ));
                }
                profile.slowdown[w] = s.factor;
            }
        }
        profile
            .validate(n)
            .map_err(|e| ConfigError::field("profile", e.to_string()))?;
        Ok(profile)
    }

    fn datasets(&self) -> Result<(Dataset, Dataset), ConfigError> {
        let d = self.model.input_dim;
        let data_err = |e: crate::model::ModelError| ConfigError::field("data", e.to_string());
        let (train, eval) = match &self.data {
            DataConfig::SyntheticQuadratic { samples, noise, seed } => {
                if *samples == 0 {
                    return Err(ConfigError::field("data.samples", "must be positive"));
                }
                let set = Dataset::synthetic_quadratic(d, *samples, *noise, *seed).map_err(data_err)?;
                (set.clone(), set)
            }
            DataConfig::SyntheticClassification {
                train_samples,
                eval_samples,
                label_noise,
                seed,
            } => {
                if *train_samples == 0 || *eval_samples == 0 {
                    return Err(ConfigError::field(
                        "data",
                        "train_samples and eval_samples must be positive",
                    ));
                }
                if !(0.0..=0.5).contains(label_noise) {
                    return Err(ConfigError::field("data.label_noise", "must be in [0, 0.5]"));
                }
                Dataset::synthetic_classification(d, *train_samples, *eval_samples, *label_noise, *seed)
                    .map_err(data_err)?
            }
            DataConfig::Csv { path, eval_path } => {
                let train = Dataset::from_csv_path(path).map_err(|e| ConfigError::field("data.path", e.to_string()))?;
                let eval = match eval_path {
                    Some(p) => {
                        Dataset::from_csv_path(p).map_err(|e| ConfigError::field("data.eval_path", e.to_string()))?
                    }
                    None => train.clone(),
                };
                (train, eval)
            }
        };
        if train.dim() != d || eval.dim() != d {
            return Err(ConfigError::field(
                "model.input_dim",
                format!("is {d} but the data has {} features", train.dim()),
            ));
        }
        Ok((train, eval))
    }

    /// Check every field and build the run.
    pub fn build(&self) -> Result<TrainSetup, ConfigError> {
        let nodes = self.node_map()?;
        let n = nodes.workers();
        if self.model.input_dim == 0 {
            return Err(ConfigError::field("model.input_dim", "must be positive"));
        }
        if !(self.model.l2 >= 0.0 && self.model.l2.is_finite()) {
            return Err(ConfigError::field("model.l2", "must be non-negative"));
        }
        let kind = match (self.model.kind, self.model.hidden) {
            (ModelChoice::Quadratic, None) => ModelKind::Quadratic,
            (ModelChoice::LogisticRegression, None) => ModelKind::LogisticRegression,
            (ModelChoice::Mlp, Some(h)) if h > 0 => ModelKind::Mlp1Hidden { hidden: h },
            (ModelChoice::Mlp, _) => return Err(ConfigError::field("model.hidden", "mlp needs a positive width")),
            (_, Some(_)) => return Err(ConfigError::field("model.hidden", "only valid for mlp")),
        };
        let spec = ModelSpec {
            kind,
            input_dim: self.model.input_dim,
            l2: self.model.l2,
        };
        if !(self.optimizer.learning_rate.is_finite() && self.optimizer.learning_rate > 0.0) {
            return Err(ConfigError::field("optimizer.learning_rate", "must be positive"));
        }
        if self.optimizer.batch_size == 0 {
            return Err(ConfigError::field("optimizer.batch_size", "must be positive"));
        }
        if self.section_length == 0 {
            return Err(ConfigError::field("section_length", "must be positive"));
        }
        if self.algorithm == AlgorithmKind::CentralizedPs && self.section_length != 1 {
            return Err(ConfigError::field("section_length", "centralized-ps requires 1"));
        }
        if self.eval_every == 0 {
            return Err(ConfigError::field("eval_every", "must be positive"));
        }
        if self.termination.max_iterations == 0 {
            return Err(ConfigError::field("termination.max_iterations", "must be positive"));
        }
        if self.termination.time_cap.is_some_and(|t| t.is_nan() || t <= 0.0) {
            return Err(ConfigError::field("termination.time_cap", "must be positive"));
        }
        if self.termination.loss_threshold.is_some_and(|t| !t.is_finite()) {
            return Err(ConfigError::field("termination.loss_threshold", "must be finite"));
        }
        if self.group_size == 0 || self.group_size > n {
            return Err(ConfigError::field(
                "group_size",
                format!("{} outside 1..={n}", self.group_size),
            ));
        }
        if self.coordinator.inter_intra && nodes.uniform_width().is_none() {
            return Err(ConfigError::field(
                "coordinator.inter_intra",
                "needs a uniform topology (nodes × per_node)",
            ));
        }
        let schedule = match (&self.schedule, self.algorithm) {
            (Some(src), AlgorithmKind::PreduceStatic) => {
                let rule = src
                    .build(n)
                    .map_err(|e| ConfigError::field("schedule", e.to_string()))?;
                rule.validate_conflict_free()
                    .map_err(|v| ConfigError::field("schedule", v.to_string()))?;
                Some(rule)
            }
            (None, AlgorithmKind::PreduceStatic) => {
                return Err(ConfigError::field("schedule", "required by preduce-static"));
            }
            _ => None,
        };
        let profile = self.profile(n)?;
        let (train, eval) = self.datasets()?;
        let model = Model::new(spec, Arc::new(train)).map_err(|e| ConfigError::field("model", e.to_string()))?;
        let setup = TrainSetup {
            init: spec.init_params(self.model.init_seed, self.model.init_scale),
            model,
            eval_set: Arc::new(eval),
            optimizer: self.optimizer,
            nodes,
            algorithm: self.algorithm,
            section_length: self.section_length,
            group_size: self.group_size,
            c_thres: self.coordinator.c_thres.filter(|&c| c > 0),
            inter_intra: self.coordinator.inter_intra,
            schedule,
            profile,
            termination: self.termination,
            seed: self.seed,
            eval_every: self.eval_every,
            cooldown_rounds: self.cooldown_rounds,
            cache_capacity: self.coordinator.cache_capacity,
            record_trace: self.trace,
        };
        setup.validate().map_err(|e| ConfigError::field("run", e.to_string()))?;
        Ok(setup)
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

/// Input of the `spectral` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    pub policy: PolicySpec,
}

fn default_samples() -> usize {
    2000
}

impl SpectralConfig {
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: SpectralConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if let PolicySpec::StaticSchedule {
            rule: RuleSource::FromFile { path },
            ..
        } = &mut cfg.policy
        {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if cfg.samples == 0 {
            return Err(ConfigError::field("samples", "must be positive"));
        }
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        SpectralConfig::from_toml_str(&read(path)?, base_dir(path))
    }
}

/// Input of the `validate-schedule` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Needed only for rules read from a file.
    #[serde(default)]
    pub workers: Option<usize>,
    pub schedule: RuleSource,
}

impl ScheduleConfig {
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ScheduleConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if let RuleSource::FromFile { path } = &mut cfg.schedule {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        ScheduleConfig::from_toml_str(&read(path)?, base_dir(path))
    }

    pub fn workers(&self) -> Result<usize, ConfigError> {
        match (&self.schedule, self.workers) {
            (_, Some(n)) => Ok(n),
            (RuleSource::Builtin4x4, None) => Ok(16),
            (RuleSource::Generalized { nodes, per_node }, None) => Ok(nodes * per_node),
            (RuleSource::FromFile { .. }, None) => Err(ConfigError::field(
                "workers",
                "required for a schedule read from a file",
            )),
        }
    }

    pub fn build(&self) -> Result<ScheduleRule, ConfigError> {
        self.schedule
            .build(self.workers()?)
            .map_err(|e| ConfigError::field("schedule", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
algorithm = "preduce-random"

[topology]
nodes = 2
per_node = 2

[model]
kind = "quadratic"
input_dim = 4

[data]
source = "synthetic-quadratic"
samples = 32

[optimizer]
learning_rate = 0.1
batch_size = 4

[termination]
max_iterations = 50
"#;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::from_toml_str(text, Path::new("."))
    }

    #[test]
    fn minimal_config_builds() {
        let cfg = parse(BASE).unwrap();
        let setup = cfg.build().unwrap();
        assert_eq!(setup.workers(), 4);
        assert_eq!(setup.section_length, 1);
        assert_eq!(setup.c_thres, Some(4));
        assert_eq!(setup.eval_every, 10);
        assert_eq!(cfg.run_id(), format!("{}-s3", cfg.config_hash()));
    }

    #[test]
    fn hash_ignores_seed_but_not_content() {
        let a = parse(BASE).unwrap();
        let mut b = a.clone();
        b.seed = 99;
        assert_eq!(a.config_hash(), b.config_hash());
        b.section_length = 2;
        assert_ne!(a.config_hash(), b.config_hash());
        let again = parse(&a.to_toml()).unwrap();
        assert_eq!(again, a);
    }

    #[test]
    fn field_errors_name_the_field() {
        let bad = BASE.replace("batch_size = 4", "batch_size = 0");
        let err = parse(&bad).unwrap().build().unwrap_err();
        assert!(err.to_string().starts_with("optimizer.batch_size"), "{err}");

        let bad = BASE.replace("seed = 3", "seed = 3\ngroup_size = 9");
        let err = parse(&bad).unwrap().build().unwrap_err();
        assert!(err.to_string().starts_with("group_size"), "{err}");

        let bad = BASE.replace("input_dim = 4", "input_dim = 4\nwidth = 2");
        assert!(matches!(parse(&bad), Err(ConfigError::Parse(_))));

        let bad = BASE.replace("preduce-random", "preduce-static");
        let err = parse(&bad).unwrap().build().unwrap_err();
        assert!(err.to_string().starts_with("schedule"), "{err}");
    }

    #[test]
    fn straggler_defaults_to_last_worker() {
        let text = format!("{BASE}\n[straggler]\nfactor = 5.0\n");
        let setup = parse(&text).unwrap().build().unwrap();
        assert_eq!(setup.profile.slowdown, vec![1.0, 1.0, 1.0, 5.0]);
    }
}
