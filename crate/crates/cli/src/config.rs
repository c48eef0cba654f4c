//! Experiment configuration files (TOML) and their resolved, hashable form.

use std::path::{Path, PathBuf};

use eyecue_core::model::ModelConfig;
use eyecue_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_error, CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Labeled manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    /// Seed of the class-balanced train/test split.
    pub split_seed: u64,
    pub train_fraction: f64,
    /// Training runs per cell with consecutive seeds.
    pub repeats: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.jsonl"),
            split_seed: 0,
            train_fraction: eyecue_core::dataset::split::DEFAULT_TRAIN_FRACTION,
            repeats: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CliError::Usage("train_fraction must be in (0, 1)".into()));
        }
        if self.repeats == 0 {
            return Err(CliError::Usage("repeats must be at least 1".into()));
        }
        Ok(())
    }

    /// Parses and validates a config file, resolving the manifest path.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let mut config: ExperimentConfig = toml::from_str(&text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(1);
            CliError::Core(eyecue_core::Error::Schema {
                path: path.to_path_buf(),
                line,
                message: e.message().to_string(),
            })
        })?;
        if config.manifest.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            config.manifest = base.join(&config.manifest);
        }
        config.validate()?;
        Ok(config)
    }
}

/// Canonical TOML of a resolved configuration.
pub fn to_toml(value: &impl Serialize) -> CliResult<String> {
    toml::to_string(value).map_err(CliError::internal)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
