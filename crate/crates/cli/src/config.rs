use std::path::Path;

use anyhow::Context;
use repo_attn::tasks::TaskKind;
use repo_attn::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::failure::OrUsage;

fn default_train_max_len() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    /// Longest example length counted as in-domain during evaluation.
    #[serde(default = "default_train_max_len")]
    pub train_max_len: usize,
}

/// The single JSON document accepted by `train --config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSection,
}

impl RunConfig {
    pub fn parse(bytes: &[u8]) -> anyhow::Result<Self> {
        let cfg: RunConfig = serde_json::from_slice(bytes)
            .context("config does not match the expected schema")
            .or_usage()?;
        cfg.model.validate().context("model section").or_usage()?;
        cfg.train.validate().context("train section").or_usage()?;
        Ok(cfg)
    }

    /// Parse a config file, returning it with its raw bytes for hashing.
    pub fn load(path: &Path) -> anyhow::Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .or_usage()?;
        let cfg = Self::parse(&bytes).with_context(|| format!("in {}", path.display()))?;
        Ok((cfg, bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use repo_attn::Schedule;

    fn doc(schedule: &str) -> String {
        format!(
            r#"{{
  "model": {{"vocab_size": 32, "d_model": 16, "n_layers": 2, "n_heads": 2, "d_p": 4,
             "d_ff": 32, "schedule": "{schedule}", "max_seq_len": 64}},
  "train": {{"steps": 10, "batch_size": 4, "learning_rate": 0.001, "weight_decay": 0.0,
             "warmup_steps": 2, "clip_norm": 1.0, "seed": 3}},
  "task": {{"kind": "reversal"}}
}}"#
        )
    }

    #[test]
    fn schedules_differ_only_in_their_field() {
        let rope = RunConfig::parse(doc("rope").as_bytes()).unwrap();
        let repo = RunConfig::parse(doc("repo").as_bytes()).unwrap();
        assert_eq!(rope.model.schedule, Schedule::Rope);
        assert_eq!(repo.model.schedule, Schedule::Repo);
        let mut patched = rope.clone();
        patched.model.schedule = Schedule::Repo;
        assert_eq!(patched, repo);
        assert_eq!(rope.task.train_max_len, 20);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let bad = doc("rope").replace("\"seed\": 3", "\"seed\": 3, \"lr_decay\": 1");
        let err = format!("{:#}", RunConfig::parse(bad.as_bytes()).unwrap_err());
        assert!(err.contains("lr_decay"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        let bad = doc("rope").replace("\"d_p\": 4", "\"d_p\": 16");
        let err = format!("{:#}", RunConfig::parse(bad.as_bytes()).unwrap_err());
        assert!(err.contains("d_p"), "{err}");
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut n = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "json") {
                RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
                n += 1;
            }
        }
        assert!(n >= 3);
    }
}
