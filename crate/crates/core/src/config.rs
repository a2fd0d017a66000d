//! Run configuration shared by every command, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataConfig;
use crate::env::SuiteConfig;
use crate::eval::{AblationConfig, EvalConfig};
use crate::model::ModelConfig;
use crate::rl::GrpoConfig;
use crate::sft::SftConfig;
use crate::util::config_hash;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub chunks: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self { chunks: 50 }
    }
}

/// Every section is optional; missing keys take the desk defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub suite: SuiteConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub sft: SftConfig,
    pub rl: GrpoConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub latency: LatencyConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.suite.validate().map_err(|e| invalid(&e))?;
        self.model.validate().map_err(|e| invalid(&e))?;
        self.sft.validate().map_err(|e| invalid(&e))?;
        self.rl.validate().map_err(|e| invalid(&e))?;
        self.eval.validate().map_err(|e| invalid(&e))?;
        if self.ablation.seeds.is_empty() || self.ablation.n_conditions == 0 {
            return Err(ConfigError::Invalid("ablation needs seeds and n_conditions >= 1".into()));
        }
        if self.latency.chunks == 0 {
            return Err(ConfigError::Invalid("latency.chunks must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hash of the command name, the effective config and any extra inputs
    /// (such as checkpoint digests).
    pub fn run_hash(&self, command: &str, inputs: &[String]) -> String {
        config_hash(&(command, self, inputs))
    }

    /// `<out>/<command>-<first 12 hex digits of the run hash>`.
    pub fn run_dir(&self, out: &Path, command: &str, inputs: &[String]) -> PathBuf {
        out.join(format!("{command}-{}", &self.run_hash(command, inputs)[..12]))
    }
}
