//! Experiment configuration: TOML on disk, dotted-key overrides, validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wbr::optim::ClipPolicy;
use wbr::trainer::{Method, TrainConfig};

pub const DATA_DIR_ENV: &str = "WBR_DATA_DIR";

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// A configuration problem, tied to the offending key.
#[derive(Debug, thiserror::Error)]
#[error("invalid config: {field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Raw IDX files in `dir`, or in `$WBR_DATA_DIR/mnist` when `dir` is unset.
    Mnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
    },
    /// Pre-extracted WBRF feature files.
    Features {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub base: usize,
    pub increment: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order_seed: Option<u64>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            base: 0,
            increment: 1,
            order_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// `N` in `784x(32xN)x10`.
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Explicit per-layer widths; overrides `hidden_layers`/`hidden_width`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden_layers: 0,
            hidden_width: 32,
            widths: None,
        }
    }
}

impl ModelSpec {
    pub fn hidden(&self) -> Vec<usize> {
        self.widths
            .clone()
            .unwrap_or_else(|| vec![self.hidden_width; self.hidden_layers])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Where the dataset files of a validated config live.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DatasetPaths {
    Mnist { dir: PathBuf },
    Features { train: PathBuf, test: PathBuf },
}

impl ExperimentConfig {
    /// Reads `path`, applies `KEY=VALUE` overrides in order, then validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("--config", format!("{}: {e}", path.display())))?;
        let mut value: toml::Value = toml::from_str(&text)
            .map_err(|e| ConfigError::new(path.display().to_string(), e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::new(o.clone(), "override must look like KEY=VALUE"))?;
            set_dotted(&mut value, key.trim(), parse_scalar(raw.trim()))?;
        }
        Self::from_value(value)
    }

    pub fn from_value(value: toml::Value) -> Result<Self> {
        let mut cfg: Self = value.try_into().map_err(|e: toml::de::Error| {
            ConfigError::new(field_of(&e), e.message().to_string())
        })?;
        if cfg.method == Method::Finetune {
            cfg.train.replay_enabled = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }

    pub fn to_value(&self) -> toml::Value {
        toml::Value::try_from(self).expect("config serialises to TOML")
    }

    /// Checks everything a run needs before any training starts.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(ConfigError::new("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(ConfigError::new("seeds", "seeds must be distinct"));
        }
        if self.scenario.increment == 0 {
            return Err(ConfigError::new("scenario.increment", "must be at least 1"));
        }
        if self.model.hidden().contains(&0) {
            return Err(ConfigError::new(
                "model",
                "hidden layer widths must be positive",
            ));
        }
        self.train
            .validate()
            .map_err(|e| ConfigError::new("train", e.to_string()))?;
        match self.method {
            Method::Wbr if !self.train.replay_enabled => {
                return Err(ConfigError::new(
                    "train.replay_enabled",
                    "method wbr needs replay; use method = \"finetune\" instead",
                ));
            }
            Method::Simplecil => {
                if self.train.clip_new != ClipPolicy::None
                    || self.train.clip_memory != ClipPolicy::None
                {
                    return Err(ConfigError::new(
                        "train",
                        "simplecil does not train, clip policies do not apply",
                    ));
                }
                if self.model != ModelSpec::default() {
                    return Err(ConfigError::new(
                        "model",
                        "simplecil has no trainable model",
                    ));
                }
            }
            _ => {}
        }
        self.dataset_paths().map(|_| ())
    }

    /// Resolves and checks the dataset location.
    pub fn dataset_paths(&self) -> Result<DatasetPaths> {
        match &self.dataset {
            DatasetSpec::Mnist { dir } => {
                let dir = match dir {
                    Some(d) => d.clone(),
                    None => std::env::var_os(DATA_DIR_ENV)
                        .map(|root| PathBuf::from(root).join("mnist"))
                        .ok_or_else(|| {
                            ConfigError::new(
                                "dataset.dir",
                                format!("missing, and {DATA_DIR_ENV} is not set"),
                            )
                        })?,
                };
                for f in MNIST_FILES {
                    if !dir.join(f).is_file() {
                        return Err(ConfigError::new(
                            "dataset.dir",
                            format!("{} has no {f}", dir.display()),
                        ));
                    }
                }
                Ok(DatasetPaths::Mnist { dir })
            }
            DatasetSpec::Features { train, test } => {
                let check = |field: &str, p: &Option<PathBuf>| -> Result<PathBuf> {
                    let p = p
                        .as_ref()
                        .ok_or_else(|| ConfigError::new(field, "missing feature file path"))?;
                    if !p.is_file() {
                        return Err(ConfigError::new(
                            field,
                            format!("{} does not exist", p.display()),
                        ));
                    }
                    Ok(p.clone())
                };
                Ok(DatasetPaths::Features {
                    train: check("dataset.train", train)?,
                    test: check("dataset.test", test)?,
                })
            }
        }
    }

    /// The training config of one seed.
    pub fn train_for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

/// `0.5` -> float, `3` -> integer, `true` -> bool, anything else -> string.
pub fn parse_scalar(raw: &str) -> toml::Value {
    if let Ok(v) = raw.parse::<i64>() {
        return toml::Value::Integer(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return toml::Value::Float(v);
    }
    if let Ok(v) = raw.parse::<bool>() {
        return toml::Value::Boolean(v);
    }
    if raw.starts_with('[') {
        if let Ok(toml::Value::Table(t)) = toml::from_str::<toml::Value>(&format!("v = {raw}")) {
            if let Some(v) = t.get("v") {
                return v.clone();
            }
        }
    }
    toml::Value::String(raw.trim_matches('"').to_string())
}

/// Sets `a.b.c = value`, creating intermediate tables.
pub fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::new(key, "empty key segment"));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| ConfigError::new(parts[..i].join("."), "is not a table"))?;
        if i + 1 == parts.len() {
            // Integers are accepted where the schema wants floats.
            let value = match (table.get(*part), value) {
                (Some(toml::Value::Float(_)), toml::Value::Integer(n)) => {
                    toml::Value::Float(n as f64)
                }
                (_, v) => v,
            };
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("loop returns on the last segment")
}

/// Sets a clip policy from a number (keeping an existing mode) or `none`.
pub fn set_clip(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    if raw.eq_ignore_ascii_case("none") {
        let mut t = toml::Table::new();
        t.insert("mode".into(), "none".into());
        return set_dotted(root, key, toml::Value::Table(t));
    }
    let threshold: f64 = raw
        .parse()
        .map_err(|_| ConfigError::new(key, format!("expected a number or none, got {raw:?}")))?;
    let mode = lookup(root, key)
        .and_then(|v| v.get("mode"))
        .and_then(|m| m.as_str())
        .filter(|m| *m != "none")
        .unwrap_or("global-l2-norm")
        .to_string();
    let mut t = toml::Table::new();
    t.insert("mode".into(), mode.into());
    t.insert("threshold".into(), threshold.into());
    set_dotted(root, key, toml::Value::Table(t))
}

fn lookup<'a>(root: &'a toml::Value, key: &str) -> Option<&'a toml::Value> {
    key.split('.').try_fold(root, |node, part| node.get(part))
}

fn field_of(e: &toml::de::Error) -> String {
    let msg = e.message();
    for marker in ["missing field `", "unknown field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    "config".into()
}
