//! Per-run output directories: the exact resolved config plus a run manifest.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::{io_error, CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// SHA-256 of the resolved config TOML.
    pub config_hash: String,
    pub output_dir: PathBuf,
    /// Milliseconds since the Unix epoch.
    pub started_at_ms: u64,
    pub finished_at_ms: Option<u64>,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// An open run directory. Artifacts other than `run.json` depend only on the
/// resolved config, so re-running it reproduces them byte for byte.
pub struct Run {
    pub dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    /// Creates `runs_dir/{command}-{hash prefix}` and writes `config.toml`,
    /// plus `options.toml` for command-specific flags. The hash covers both.
    pub fn start(
        runs_dir: &Path,
        command: &str,
        config_path: Option<&Path>,
        resolved_toml: &str,
        options_toml: Option<&str>,
    ) -> CliResult<Self> {
        let mut hashed = resolved_toml.to_string();
        if let Some(options) = options_toml {
            hashed.push_str("\n[options]\n");
            hashed.push_str(options);
        }
        let hash = sha256_hex(hashed.as_bytes());
        let dir = runs_dir.join(format!("{command}-{}", &hash[..12]));
        std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        let run = Run {
            manifest: RunManifest {
                command: command.to_string(),
                config_path: config_path.map(Path::to_path_buf),
                config_hash: hash,
                output_dir: dir.clone(),
                started_at_ms: now_ms(),
                finished_at_ms: None,
            },
            dir,
        };
        run.write_text("config.toml", resolved_toml)?;
        if let Some(options) = options_toml {
            run.write_text("options.toml", options)?;
        }
        run.write_manifest()?;
        Ok(run)
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| io_error(&path, e))
    }

    pub fn write_text(&self, name: &str, text: &str) -> CliResult<()> {
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(CliError::internal)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    fn write_manifest(&self) -> CliResult<()> {
        self.write_json("run.json", &self.manifest)
    }

    pub fn finish(mut self) -> CliResult<PathBuf> {
        self.manifest.finished_at_ms = Some(now_ms());
        self.write_manifest()?;
        Ok(self.dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_is_named_by_config_hash() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::start(dir.path(), "train", None, "a = 1\n", None).unwrap();
        let hash = sha256_hex(b"a = 1\n");
        assert_eq!(run.dir, dir.path().join(format!("train-{}", &hash[..12])));
        assert_eq!(std::fs::read_to_string(run.path("config.toml")).unwrap(), "a = 1\n");
        let out = run.finish().unwrap();
        let manifest: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
        assert_eq!(manifest.config_hash, hash);
        assert!(manifest.finished_at_ms.unwrap() >= manifest.started_at_ms);

        let with_options = Run::start(dir.path(), "train", None, "a = 1\n", Some("h = [1]\n")).unwrap();
        assert_ne!(with_options.dir, out);
        assert!(with_options.path("options.toml").exists());
    }
}
