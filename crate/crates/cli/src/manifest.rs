use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use repo_attn::model::checkpoint::write_atomic;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+g", env!("REPO_ATTN_GIT_REV"));

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub started_at: String,
    pub finished_at: Option<String>,
}

impl RunManifest {
    pub fn start(command: &str, config: &[u8], seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            config_sha256: sha256_hex(config),
            seed,
            artifacts: Vec::new(),
            started_at: now(),
            finished_at: None,
        }
    }

    pub fn record(&mut self, path: impl Into<PathBuf>) {
        let path = path.into();
        if !self.artifacts.contains(&path) {
            self.artifacts.push(path);
        }
    }

    pub fn finish(mut self, path: &Path) -> anyhow::Result<()> {
        self.finished_at = Some(now());
        write_atomic(path, &serde_json::to_vec_pretty(&self)?)?;
        Ok(())
    }
}

/// `data.jsonl` → `data.jsonl.manifest.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}
