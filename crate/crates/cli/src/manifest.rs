use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use decal::model::ModelConfig;
use decal::train::TrainConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Record of one CLI invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub build: String,
    /// Every random choice is drawn from one ChaCha8 generator seeded here.
    pub seed: Option<u64>,
    pub rng: &'static str,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    /// Input path → SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Output path → SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
    pub notes: Vec<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            build: format!(
                "{}-{}{}",
                env!("CARGO_PKG_NAME"),
                env!("CARGO_PKG_VERSION"),
                option_env!("DECAL_BUILD_ID").map(|id| format!("+{id}")).unwrap_or_default()
            ),
            seed: None,
            rng: "ChaCha8",
            model: None,
            train: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: Vec::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
        }
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        let d = file_digest(path)?;
        self.inputs.insert(path.display().to_string(), d);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        let d = file_digest(path)?;
        self.outputs.insert(path.display().to_string(), d);
        Ok(())
    }

    /// Writes the manifest as pretty JSON and returns its path.
    pub fn finish(mut self, path: PathBuf) -> std::io::Result<PathBuf> {
        self.finished_unix_ms = now_ms();
        let json = serde_json::to_string_pretty(&self).map_err(std::io::Error::from)?;
        std::fs::write(&path, json + "\n")?;
        Ok(path)
    }
}
