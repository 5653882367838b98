use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use repo_attn::model::checkpoint;
use repo_attn::tasks::DatasetRecord;
use repo_attn::trainer::{evaluate_exact, StepStats, TrainObserver, Trainer, METRICS_HEADER};
use repo_attn::{EvalReport, Model};
use serde::{Deserialize, Serialize};

use super::{check_fits, create_dir, emit, load_checkpoint, read_dataset};
use crate::config::RunConfig;
use crate::failure::{usage, OrUsage};
use crate::manifest::RunManifest;
use crate::TrainArgs;

const LOG_EVERY: usize = 100;

/// Stored in every checkpoint header so runs can be resumed and evaluated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMeta {
    pub step: usize,
    pub adam_t: u64,
    pub run: RunConfig,
}

struct Observer<'a> {
    metrics: BufWriter<File>,
    checkpoints: PathBuf,
    run: &'a RunConfig,
    eval_data: Option<&'a [DatasetRecord]>,
    saved: Vec<PathBuf>,
}

fn save(path: &Path, trainer: &Trainer<f32>, run: &RunConfig) -> repo_attn::Result<()> {
    let meta = TrainMeta {
        step: trainer.step,
        adam_t: trainer.optimizer.t,
        run: run.clone(),
    };
    checkpoint::save(path, &trainer.model, &serde_json::to_value(meta)?, &trainer.optimizer_tensors())
}

fn log_eval(step: usize, report: &EvalReport) {
    log::info!(
        "step {step}: exact match in-domain {:.3}, out-of-domain {}",
        report.in_domain.unwrap_or(f64::NAN),
        report.out_of_domain.map_or("n/a".to_string(), |v| format!("{v:.3}"))
    );
}

impl TrainObserver<f32> for Observer<'_> {
    fn on_step(&mut self, s: &StepStats) -> repo_attn::Result<()> {
        writeln!(self.metrics, "{}", s.csv_row())?;
        if s.step % LOG_EVERY == 0 {
            log::info!("step {} loss {:.4} lr {:.2e} grad_norm {:.3}", s.step, s.loss, s.lr, s.grad_norm);
        }
        Ok(())
    }

    fn on_eval(&mut self, trainer: &Trainer<f32>) -> repo_attn::Result<()> {
        self.metrics.flush()?;
        let path = self.checkpoints.join(format!("step_{:06}.ckpt", trainer.step));
        save(&path, trainer, self.run)?;
        self.saved.push(path);
        if let Some(data) = self.eval_data {
            log_eval(trainer.step, &evaluate_exact(&trainer.model, data, self.run.task.train_max_len)?);
        }
        Ok(())
    }
}

fn resume(path: &Path, run: &RunConfig) -> anyhow::Result<Trainer<f32>> {
    let ckpt = load_checkpoint(path)?;
    let meta: TrainMeta = serde_json::from_value(ckpt.meta.clone())
        .context("checkpoint carries no training state")
        .or_usage()?;
    if ckpt.model.config() != &run.model {
        return Err(usage("checkpoint model config differs from the model section of --config"));
    }
    if meta.step > run.train.steps {
        return Err(usage(format!(
            "checkpoint is at step {} but the config asks for {} steps",
            meta.step, run.train.steps
        )));
    }
    let mut trainer = Trainer::new(ckpt.model, run.train.clone()).or_usage()?;
    trainer.restore(meta.step, meta.adam_t, &ckpt.extra).or_usage()?;
    log::info!("resuming from {} at step {}", path.display(), meta.step);
    Ok(trainer)
}

pub fn run(args: TrainArgs) -> anyhow::Result<()> {
    let (mut run, raw) = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    let data = read_dataset(&args.data)?;
    check_fits(&data, &run.model)?;
    let eval_data = args.eval_data.as_deref().map(read_dataset).transpose()?;
    if let Some(e) = &eval_data {
        check_fits(e, &run.model)?;
    }
    if args.dry_run {
        let params = Model::<f32>::new(run.model.clone(), run.train.seed)?.num_parameters();
        println!(
            "config ok: {} parameters, {} training records, {} steps",
            params,
            data.len(),
            run.train.steps
        );
        return Ok(());
    }

    let mut hashed = raw;
    hashed.extend_from_slice(&run.train.seed.to_le_bytes());
    let mut manifest = RunManifest::start("train", &hashed, Some(run.train.seed));
    let checkpoints = args.out.join("checkpoints");
    create_dir(&checkpoints)?;

    let mut trainer = match &args.resume {
        Some(path) => resume(path, &run)?,
        None => Trainer::new(Model::new(run.model.clone(), run.train.seed)?, run.train.clone())?,
    };
    let metrics_path = args.out.join("metrics.csv");
    let append = args.resume.is_some() && metrics_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&metrics_path)
        .with_context(|| format!("cannot open {}", metrics_path.display()))
        .or_usage()?;
    let mut metrics = BufWriter::new(file);
    if !append {
        writeln!(metrics, "{METRICS_HEADER}")?;
    }

    let mut observer = Observer {
        metrics,
        checkpoints,
        run: &run,
        eval_data: eval_data.as_deref(),
        saved: Vec::new(),
    };
    let outcome = trainer.run(&data, &mut observer);
    observer.metrics.flush()?;
    manifest.record(&metrics_path);
    for p in std::mem::take(&mut observer.saved) {
        manifest.record(p);
    }
    outcome?;

    let final_path = args.out.join("final.ckpt");
    save(&final_path, &trainer, &run)?;
    manifest.record(&final_path);
    if let Some(e) = &eval_data {
        let report = evaluate_exact(&trainer.model, e, run.task.train_max_len)?;
        log_eval(trainer.step, &report);
        emit(&mut manifest, &args.out.join("eval.json"), &serde_json::to_vec_pretty(&report)?)?;
    }
    manifest.finish(&args.out.join("manifest.json"))?;
    log::info!("finished at step {}; final checkpoint {}", trainer.step, final_path.display());
    Ok(())
}
