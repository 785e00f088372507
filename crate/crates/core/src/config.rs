//! Run configuration: strict TOML with `HILO_<SECTION>__<KEY>` environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ars::ArsConfig;
use crate::nnet::PoolMode;
use crate::policy::{HlArch, HlMode, InitScheme, PolicyArch, PolicyKind};
use crate::world::Task;

pub const ENV_PREFIX: &str = "HILO_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid value for `{field}`: {message}")]
    Field { field: String, message: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn field(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub kind: PolicyKind,
    pub hl_mode: HlMode,
    pub image_size: usize,
    pub conv_channels: Vec<usize>,
    pub use_pool: bool,
    pub pool: PoolMode,
    pub feature_dim: usize,
    pub extra_fc: Vec<usize>,
    pub latent_dim: usize,
    pub flat_hidden: usize,
    pub init: InitScheme,
}

impl Default for ArchSection {
    fn default() -> Self {
        let hl = HlArch::standard(0, 2);
        Self {
            kind: PolicyKind::Hierarchical,
            hl_mode: HlMode::Variable,
            image_size: hl.image_size,
            conv_channels: hl.conv_channels,
            use_pool: hl.use_pool,
            pool: hl.pool,
            feature_dim: hl.feature_dim,
            extra_fc: hl.extra_fc,
            latent_dim: hl.latent_dim,
            flat_hidden: 10,
            init: InitScheme::Gaussian { std: 0.1 },
        }
    }
}

impl ArchSection {
    pub fn policy_arch(&self, task: Task) -> PolicyArch {
        PolicyArch {
            kind: self.kind,
            hl: HlArch {
                image_size: self.image_size,
                conv_channels: self.conv_channels.clone(),
                use_pool: self.use_pool,
                pool: self.pool,
                feature_dim: self.feature_dim,
                extra_fc: self.extra_fc.clone(),
                task_input_dim: task.task_input_dim(),
                latent_dim: self.latent_dim,
            },
            hl_mode: self.hl_mode,
            flat_hidden: self.flat_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArsSection {
    pub num_directions: usize,
    pub top_k: usize,
    pub step_size: f64,
    pub noise_std: f64,
    pub episodes_per_eval: usize,
    pub obs_norm: bool,
}

impl Default for ArsSection {
    fn default() -> Self {
        let d = ArsConfig::default();
        Self {
            num_directions: d.num_directions,
            top_k: d.top_k,
            step_size: d.step_size,
            noise_std: d.noise_std,
            episodes_per_eval: d.episodes_per_eval,
            obs_norm: d.obs_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunnerSection {
    pub workers: usize,
    pub endpoints: Vec<String>,
    pub job_timeout_s: f64,
}

impl Default for RunnerSection {
    fn default() -> Self {
        Self { workers: 1, endpoints: Vec::new(), job_timeout_s: 60.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Held-out episodes evaluating the updated parameters after every iteration.
    #[serde(default)]
    pub eval_episodes: usize,
    #[serde(default)]
    pub arch: ArchSection,
    #[serde(default)]
    pub ars: ArsSection,
    #[serde(default)]
    pub runner: RunnerSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_iterations() -> u64 {
    300
}

fn default_checkpoint_every() -> u64 {
    10
}

impl RunConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            seed: 0,
            output_dir: default_output_dir(),
            iterations: default_iterations(),
            checkpoint_every: default_checkpoint_every(),
            eval_episodes: 0,
            arch: ArchSection::default(),
            ars: ArsSection::default(),
            runner: RunnerSection::default(),
        }
    }

    pub fn policy_arch(&self) -> PolicyArch {
        self.arch.policy_arch(self.task)
    }

    pub fn ars_config(&self) -> ArsConfig {
        ArsConfig {
            num_directions: self.ars.num_directions,
            top_k: self.ars.top_k,
            step_size: self.ars.step_size,
            noise_std: self.ars.noise_std,
            episodes_per_eval: self.ars.episodes_per_eval,
            seed: self.seed,
            obs_norm: self.ars.obs_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ars_config().validate().map_err(|e| field("ars", e.to_string()))?;
        if self.arch.kind == PolicyKind::Flat && self.ars.obs_norm {
            return Err(field("ars.obs_norm", "observation normalisation applies to the hierarchical low level only"));
        }
        self.policy_arch().validate().map_err(|e| field("arch", e))?;
        if let InitScheme::Gaussian { std } = self.arch.init {
            if !(std.is_finite() && std >= 0.0) {
                return Err(field("arch.init.std", "must be finite and non-negative"));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(field("checkpoint_every", "must be positive"));
        }
        if self.runner.workers == 0 {
            return Err(field("runner.workers", "must be at least 1"));
        }
        if !(self.runner.job_timeout_s > 0.0 && self.runner.job_timeout_s.is_finite()) {
            return Err(field("runner.job_timeout_s", "must be positive"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_env(text, std::iter::empty::<(&str, &str)>())
    }

    /// Parse `text`, apply overrides such as `("HILO_ARS__STEP_SIZE", "0.05")`, then validate.
    pub fn from_toml_with_env<I, K, V>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.as_ref().strip_prefix(ENV_PREFIX).map(|k| (k.to_string(), v.as_ref().to_string())))
            .collect();
        overrides.sort();
        for (key, value) in overrides {
            apply_override(&mut table, &key, &value)?;
        }
        let config: RunConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let path: Vec<String> = key.split("__").map(|s| s.to_ascii_lowercase()).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(field(key, "malformed override name"));
    }
    // a bare TOML literal, falling back to a plain string
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| field(&path.join("."), "override path crosses a non-table value"))?;
    }
    cur.insert(last.clone(), parsed);
    Ok(())
}
