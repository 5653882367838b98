use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::Context;
use repo_attn::model::checkpoint::{self, write_atomic, Checkpoint};
use repo_attn::tasks::{read_jsonl, DatasetRecord};
use repo_attn::ModelConfig;

use crate::failure::{usage, OrUsage};
use crate::manifest::RunManifest;

pub mod analyze;
pub mod eval;
pub mod gen;
pub mod train;

pub fn read_dataset(path: &Path) -> anyhow::Result<Vec<DatasetRecord>> {
    let file = File::open(path)
        .with_context(|| format!("cannot open dataset {}", path.display()))
        .or_usage()?;
    let records = read_jsonl(BufReader::new(file))
        .with_context(|| format!("in {}", path.display()))
        .or_usage()?;
    if records.is_empty() {
        return Err(usage(format!("dataset {} is empty", path.display())));
    }
    Ok(records)
}

/// Every record must fit the model's vocabulary and context window.
pub fn check_fits(records: &[DatasetRecord], model: &ModelConfig) -> anyhow::Result<()> {
    for (i, r) in records.iter().enumerate() {
        let line = i + 1;
        if r.prompt_ids.is_empty() || r.target_ids.is_empty() {
            return Err(usage(format!("dataset line {line}: prompt and target must be non-empty")));
        }
        if let Some(&t) = r.prompt_ids.iter().chain(&r.target_ids).find(|&&t| t as usize >= model.vocab_size) {
            return Err(usage(format!(
                "dataset line {line}: token {t} is outside the vocabulary of {}",
                model.vocab_size
            )));
        }
        let total = r.prompt_ids.len() + r.target_ids.len();
        if total > model.max_seq_len {
            return Err(usage(format!(
                "dataset line {line}: {total} tokens exceed max_seq_len {}",
                model.max_seq_len
            )));
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    checkpoint::load(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))
        .or_usage()
}

/// Atomically write `bytes` and record the path in the manifest.
pub fn emit(manifest: &mut RunManifest, path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    write_atomic(path, bytes)
        .with_context(|| format!("cannot write {}", path.display()))
        .or_usage()?;
    manifest.record(path);
    Ok(())
}

pub fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path)
        .with_context(|| format!("cannot create directory {}", path.display()))
        .or_usage()
}
