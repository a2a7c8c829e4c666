//! Run configuration files and the resolved record written next to outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use transdod_core::engine::TrainConfig;
use transdod_core::{Error, ModelConfig};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// `{"schema_version": 1, "model": {...}, "train": {...}}`; omitted sections
/// and fields take their defaults, unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|source| CliError::Config {
            path: origin.to_path_buf(),
            source,
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "{}: schema_version {} (expected {SCHEMA_VERSION})",
                origin.display(),
                cfg.schema_version
            ))
            .into());
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// The configuration at `path`, or the defaults when absent.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Everything needed to reproduce one command invocation.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest<'a, S: Serialize> {
    pub command: &'a str,
    pub config_path: Option<&'a Path>,
    pub seed: u64,
    pub output: &'a Path,
    pub resolved: S,
}

impl<S: Serialize> RunManifest<'_, S> {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(Error::from)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e).into())
    }
}
