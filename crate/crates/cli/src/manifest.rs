use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use gaussmatch::data::MANIFEST_VERSION;
use gaussmatch::train::{ExperimentConfig, CHECKPOINT_VERSION};
use serde::Serialize;

#[derive(Debug, Serialize)]
struct Versions {
    gaussmatch: &'static str,
    checkpoint_format: u32,
    dataset_manifest: u32,
}

/// Record of one invocation, written as `run_<command>.toml`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    command: String,
    args: Vec<String>,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    started_unix_secs: u64,
    wall_secs: f64,
    outputs: Vec<String>,
    versions: Versions,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<ExperimentConfig>,
    #[serde(skip)]
    clock: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            status: "running".into(),
            error: None,
            seed: None,
            started_unix_secs: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_secs: 0.0,
            outputs: Vec::new(),
            versions: Versions {
                gaussmatch: env!("CARGO_PKG_VERSION"),
                checkpoint_format: CHECKPOINT_VERSION,
                dataset_manifest: MANIFEST_VERSION,
            },
            config: None,
            clock: Some(Instant::now()),
        }
    }

    pub fn set_config(&mut self, cfg: &ExperimentConfig) {
        self.seed = Some(cfg.seed);
        self.config = Some(cfg.clone());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(&mut self, error: Option<&anyhow::Error>) {
        self.wall_secs = self.clock.map_or(0.0, |c| c.elapsed().as_secs_f64());
        match error {
            None => self.status = "ok".into(),
            Some(e) => {
                self.status = "failed".into();
                self.error = Some(format!("{e:#}"));
            }
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("run_{}.toml", self.command));
        let text = toml::to_string(self).context("serializing run manifest")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
