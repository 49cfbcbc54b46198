//! Run configuration: TOML file plus `--field value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::DatasetConfig;
use crate::losses::LossWeights;
use crate::model::ModelConfig;

pub const SEED_ENV: &str = "LAPCOMPLETE_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("unknown config field {0:?}")]
    UnknownField(String),
    #[error("config field {name:?} is ambiguous; use one of {candidates:?}")]
    Ambiguous { name: String, candidates: Vec<String> },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs `1..=phase_switch` train with `lambda = 0`; later epochs use
    /// `loss.lambda`.
    pub phase_switch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub bn_momentum: f64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            phase_switch: 20,
            batch_size: 8,
            lr: 0.001,
            bn_momentum: 0.9,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// λ in effect during `epoch` (1-based).
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if epoch <= self.phase_switch {
            0.0
        } else {
            self.loss.lambda
        }
    }
}

/// How an evaluation input is reduced to fewer points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subsample {
    #[default]
    Fps,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub runs: usize,
    pub split: String,
    /// Subsample each input to this many points; `0` keeps them all.
    pub input_points: usize,
    pub subsample: Subsample,
    /// Evaluate P_o (true) or the undeformed P_g (false).
    pub deformation: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs: 10,
            split: "test".into(),
            input_points: 0,
            subsample: Subsample::Fps,
            deformation: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            run_dir: "run".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Dataset parameters with the global seed applied.
    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .loss
            .validate()
            .map_err(ConfigError::Invalid)?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be at least 1".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(ConfigError::Invalid(format!("lr must be positive, got {}", t.lr)));
        }
        if !(0.0..=1.0).contains(&t.bn_momentum) {
            return Err(ConfigError::Invalid(format!("bn_momentum must lie in [0, 1], got {}", t.bn_momentum)));
        }
        if self.eval.runs == 0 {
            return Err(ConfigError::Invalid("eval.runs must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies `name = value` where `name` is a dotted path (`train.epochs`)
    /// or a field name that occurs once in the config (`epochs`). `value`
    /// is read as a TOML literal, falling back to a bare string.
    pub fn apply_override(&mut self, name: &str, raw: &str) -> Result<(), ConfigError> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let path = resolve_path(&root, name)?;
        let value = parse_literal(raw);
        let mut slot = &mut root;
        for key in &path {
            slot = slot
                .get_mut(key.as_str())
                .ok_or_else(|| ConfigError::UnknownField(name.to_string()))?;
        }
        *slot = value;
        *self = root.try_into().map_err(|e: toml::de::Error| {
            ConfigError::Parse(format!("--{name} {raw}: {}", e.message()))
        })?;
        Ok(())
    }

    /// Every overridable field as a dotted path.
    pub fn field_paths(&self) -> Vec<String> {
        let root = toml::Value::try_from(self).expect("config serializes");
        let mut out = Vec::new();
        collect_paths(&root, &mut Vec::new(), &mut out);
        out.into_iter().map(|p| p.join(".")).collect()
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn collect_paths(v: &toml::Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                prefix.push(k.clone());
                collect_paths(child, prefix, out);
                prefix.pop();
            }
        }
        _ => out.push(prefix.clone()),
    }
}

fn resolve_path(root: &toml::Value, name: &str) -> Result<Vec<String>, ConfigError> {
    let mut all = Vec::new();
    collect_paths(root, &mut Vec::new(), &mut all);
    let dotted: Vec<String> = name.split('.').map(str::to_string).collect();
    if all.contains(&dotted) {
        return Ok(dotted);
    }
    let matches: Vec<Vec<String>> = all
        .into_iter()
        .filter(|p| p.len() >= dotted.len() && p[p.len() - dotted.len()..] == dotted[..])
        .collect();
    match matches.len() {
        0 => Err(ConfigError::UnknownField(name.to_string())),
        1 => Ok(matches.into_iter().next().unwrap()),
        _ => Err(ConfigError::Ambiguous {
            name: name.to_string(),
            candidates: matches.iter().map(|p| p.join(".")).collect(),
        }),
    }
}
