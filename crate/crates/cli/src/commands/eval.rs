use repo_attn::trainer::evaluate_exact;

use super::{check_fits, emit, load_checkpoint, read_dataset};
use crate::commands::train::TrainMeta;
use crate::config::RunConfig;
use crate::failure::usage;
use crate::manifest::{sidecar, RunManifest};
use crate::EvalArgs;

const DEFAULT_TRAIN_MAX_LEN: usize = 20;

pub fn run(args: EvalArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    if let Some(path) = &args.config {
        let (cfg, _) = RunConfig::load(path)?;
        if &cfg.model != ckpt.model.config() {
            return Err(usage(format!(
                "checkpoint {} does not match the model section of {}",
                args.checkpoint.display(),
                path.display()
            )));
        }
    }
    let data = read_dataset(&args.data)?;
    check_fits(&data, ckpt.model.config())?;
    let stored = serde_json::from_value::<TrainMeta>(ckpt.meta.clone()).ok();
    let train_max_len = args
        .train_max_len
        .or(stored.map(|m| m.run.task.train_max_len))
        .unwrap_or(DEFAULT_TRAIN_MAX_LEN);

    let params = serde_json::json!({
        "checkpoint": args.checkpoint,
        "data": args.data,
        "train_max_len": train_max_len,
    });
    let mut manifest = RunManifest::start("eval", &serde_json::to_vec(&params)?, None);
    let report = evaluate_exact(&ckpt.model, &data, train_max_len)?;
    emit(&mut manifest, &args.out, &serde_json::to_vec_pretty(&report)?)?;
    if let Some(csv) = &args.csv {
        emit(&mut manifest, csv, report.to_csv().as_bytes())?;
    }
    manifest.finish(&sidecar(&args.out))?;
    println!(
        "exact match: overall {:.4}, in-domain {}, out-of-domain {} ({} examples)",
        report.overall,
        report.in_domain.map_or("n/a".into(), |v| format!("{v:.4}")),
        report.out_of_domain.map_or("n/a".into(), |v| format!("{v:.4}")),
        report.examples
    );
    Ok(())
}
