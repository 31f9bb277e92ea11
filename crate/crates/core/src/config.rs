//! TOML run configuration. Every section and field is optional.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{RetryPolicy, ThrottleConfig};
use crate::prompts::PromptTemplates;
use crate::runner::RunConfig;
use crate::synthesis::SynthesisConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    /// Overrides `LLM_BASE_URL`.
    pub base_url: Option<String>,
    pub max_in_flight: usize,
    pub requests_per_interval: Option<u32>,
    pub interval_ms: u64,
    pub wait_timeout_ms: u64,
    pub retry_attempts: u32,
    pub retry_base_ms: u64,
    pub retry_max_ms: u64,
    pub cache_dir: Option<PathBuf>,
}

impl Default for LlmSettings {
    fn default() -> Self {
        let throttle = ThrottleConfig::default();
        let retry = RetryPolicy::default();
        Self {
            base_url: None,
            max_in_flight: throttle.max_in_flight,
            requests_per_interval: throttle.requests_per_interval,
            interval_ms: throttle.interval.as_millis() as u64,
            wait_timeout_ms: throttle.wait_timeout.as_millis() as u64,
            retry_attempts: retry.max_attempts,
            retry_base_ms: retry.base_delay.as_millis() as u64,
            retry_max_ms: retry.max_delay.as_millis() as u64,
            cache_dir: None,
        }
    }
}

impl LlmSettings {
    pub fn throttle(&self) -> ThrottleConfig {
        ThrottleConfig {
            max_in_flight: self.max_in_flight,
            requests_per_interval: self.requests_per_interval,
            interval: Duration::from_millis(self.interval_ms),
            wait_timeout: Duration::from_millis(self.wait_timeout_ms),
        }
    }

    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.retry_attempts,
            base_delay: Duration::from_millis(self.retry_base_ms),
            max_delay: Duration::from_millis(self.retry_max_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub workers: usize,
    pub llm: LlmSettings,
    pub prompts: PromptTemplates,
    pub synthesis: SynthesisConfig,
    pub runner: RunConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            workers: 4,
            llm: LlmSettings::default(),
            prompts: PromptTemplates::default(),
            synthesis: SynthesisConfig::default(),
            runner: RunConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }
}
