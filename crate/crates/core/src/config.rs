//! Declarative run configuration.
//!
//! A run is described by a TOML file with an explicit `schema_version`.
//! Overrides of the form `key=value` are applied to the parsed document
//! before it is validated, so they take precedence over the file. Keys are
//! dotted paths (`train.episodes=5`) or one of the short aliases in
//! [`ALIASES`].

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{load_map, GridMap, MapError};
use crate::pomdp::{EnvConfig, InitMode, RewardConfig};
use crate::qfunction::{ConvSpec, NetArch};
use crate::trainer::{TrainConfig, TrainSetup};
use crate::uncertainty::Scenario;

pub const SCHEMA_VERSION: u32 = 1;

/// Short override keys and the paths they stand for.
pub const ALIASES: &[(&str, &str)] = &[
    ("E", "train.episodes"),
    ("T_ep", "train.steps_per_episode"),
    ("b", "train.batch_size"),
    ("gamma", "train.gamma"),
    ("f", "train.target_refresh"),
    ("lr", "train.lr"),
    ("N", "agents"),
    ("T_u", "sync_period"),
    ("alpha", "alpha"),
    ("seed", "seed.master"),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("unsupported schema_version {found}, expected {expected}")]
    Schema { found: i64, expected: u32 },
    #[error("map file not found: {0}")]
    MissingMap(PathBuf),
    #[error("invalid map {path}: {source}")]
    Map { path: PathBuf, source: MapError },
    #[error("invalid override `{0}`: expected key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub convs: Option<Vec<ConvSpec>>,
    pub fc_width: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSection {
    pub master: u64,
    /// Number of held-out evaluation seeds.
    #[serde(default = "default_eval_seeds")]
    pub eval_seeds: usize,
    /// Seeds used to pick the best snapshot during training; 0 keeps only
    /// the final network.
    #[serde(default = "default_eval_seeds")]
    pub validation_seeds: usize,
}

fn default_eval_seeds() -> usize {
    20
}

impl Default for SeedSection {
    fn default() -> Self {
        Self { master: 1, eval_seeds: default_eval_seeds(), validation_seeds: default_eval_seeds() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub scenario: Scenario,
    /// Map file, relative to the config file, or `builtin:synthetic10` /
    /// `builtin:toronto30`.
    pub map: String,
    pub agents: usize,
    pub alpha: f64,
    pub sync_period: u32,
    /// Sensing radius as a multiple of the cell width.
    pub sensing_range: f64,
    #[serde(default = "default_init")]
    pub init_mode: InitMode,
    #[serde(default)]
    pub log_capacity: Option<usize>,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: SeedSection,
    #[serde(default = "default_output")]
    pub output_dir: String,
    /// Directory of the config file, used to resolve relative paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_init() -> InitMode {
    InitMode::Random
}

fn default_output() -> String {
    "runs".into()
}

fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `key=value` override to a parsed document.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.into()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(spec.into()));
    }
    let path = ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, p)| p);
    let parts: Vec<&str> = path.split('.').collect();
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| ConfigError::Override(spec.into()))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

impl RunConfig {
    /// Parses `text` and applies `overrides` in order.
    pub fn from_str_with(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        match doc.get("schema_version").and_then(toml::Value::as_integer) {
            Some(v) if v == i64::from(SCHEMA_VERSION) => {}
            Some(v) => return Err(ConfigError::Schema { found: v, expected: SCHEMA_VERSION }),
            None => return Err(ConfigError::Parse("missing schema_version".into())),
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: RunConfig =
            toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str_with(&text, overrides, &base)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env_config_unchecked().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.seed.eval_seeds == 0 {
            return Err(ConfigError::Invalid("seed.eval_seeds must be positive".into()));
        }
        Ok(())
    }

    pub fn map_path(&self) -> Option<PathBuf> {
        if self.map.starts_with("builtin:") {
            None
        } else {
            Some(self.base_dir.join(&self.map))
        }
    }

    pub fn load_map(&self) -> Result<Arc<GridMap>, ConfigError> {
        let (text, path) = match self.map.as_str() {
            "builtin:synthetic10" => (crate::SYNTHETIC10_MAP.to_string(), PathBuf::from(&self.map)),
            "builtin:toronto30" => (crate::TORONTO30_MAP.to_string(), PathBuf::from(&self.map)),
            other if other.starts_with("builtin:") => {
                return Err(ConfigError::Invalid(format!("unknown builtin map `{other}`")))
            }
            _ => {
                let path = self.map_path().expect("file map");
                let text = fs::read_to_string(&path).map_err(|_| ConfigError::MissingMap(path.clone()))?;
                (text, path)
            }
        };
        load_map(&text).map(Arc::new).map_err(|source| ConfigError::Map { path, source })
    }

    fn env_config_unchecked(&self) -> EnvConfig {
        EnvConfig {
            scenario: self.scenario,
            agents: self.agents,
            alpha: self.alpha,
            sync_period: self.sync_period,
            sensing_range: self.sensing_range,
            init_mode: self.init_mode,
            episode_len: self.train.steps_per_episode,
            reward: self.reward,
            log_capacity: self.log_capacity,
        }
    }

    /// Environment config with the sensing radius converted to meters.
    pub fn env_config(&self, map: &GridMap) -> EnvConfig {
        let mut cfg = self.env_config_unchecked();
        cfg.sensing_range = self.sensing_range * map.cell_width();
        cfg
    }

    pub fn net_arch(&self, map: &GridMap) -> Result<NetArch, ConfigError> {
        let mut arch = NetArch::default_for(map.size());
        if let Some(convs) = &self.net.convs {
            arch.convs = convs.clone();
        }
        if let Some(w) = self.net.fc_width {
            arch.fc_width = w;
        }
        arch.plan().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(arch)
    }

    pub fn train_setup(&self, map: &GridMap) -> Result<TrainSetup, ConfigError> {
        Ok(TrainSetup {
            env: self.env_config(map),
            net: self.net_arch(map)?,
            train: self.train.clone(),
            seed: self.seed.master,
        })
    }

    pub fn output_root(&self) -> PathBuf {
        PathBuf::from(&self.output_dir)
    }
}
