//! Training loop, optimizer and exact-match evaluation.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, PackedBatch, TokenId};
use crate::tasks::{DatasetRecord, ReversalExample};
use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;
/// Cosine decay ends at this fraction of the peak learning rate.
pub const MIN_LR_RATIO: f64 = 0.1;

fn default_eval_every() -> usize {
    0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    /// Steps between evaluation/checkpoint callbacks; 0 disables them.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 64,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            warmup_steps: 100,
            clip_norm: 1.0,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("clip_norm", self.clip_norm),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }

    /// Linear warmup to the peak, then cosine decay to `MIN_LR_RATIO * peak`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.learning_rate;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        peak * (MIN_LR_RATIO + (1.0 - MIN_LR_RATIO) * cosine)
    }
}

/// Anything that pairs a prompt with its expected continuation.
pub trait Example: Sync {
    fn prompt(&self) -> &[TokenId];
    fn target(&self) -> &[TokenId];
    /// Bucket label for evaluation.
    fn length(&self) -> usize;
}

impl Example for ReversalExample {
    fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }
    fn target(&self) -> &[TokenId] {
        &self.target
    }
    fn length(&self) -> usize {
        self.length
    }
}

impl Example for DatasetRecord {
    fn prompt(&self) -> &[TokenId] {
        &self.prompt_ids
    }
    fn target(&self) -> &[TokenId] {
        &self.target_ids
    }
    fn length(&self) -> usize {
        self.length_label()
    }
}

/// Decoupled-weight-decay Adam state.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub first: Vec<Tensor<F>>,
    pub second: Vec<Tensor<F>>,
    pub t: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(model: &Model<F>) -> Self {
        let zeros = || model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            first: zeros(),
            second: zeros(),
            t: 0,
        }
    }

    /// One update; `grads[i]` belongs to `model.params()[i]`.
    pub fn update(&mut self, model: &mut Model<F>, grads: &[Tensor<F>], lr: f64, weight_decay: f64) {
        self.t += 1;
        let (b1, b2) = (F::lit(ADAM_BETA1), F::lit(ADAM_BETA2));
        let c1 = F::lit(1.0 - ADAM_BETA1.powi(self.t as i32));
        let c2 = F::lit(1.0 - ADAM_BETA2.powi(self.t as i32));
        let (lr_f, eps) = (F::lit(lr), F::lit(ADAM_EPS));
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            // gains and other vectors are not decayed
            let decay = if p.value.shape().len() >= 2 {
                F::one() - F::lit(lr * weight_decay)
            } else {
                F::one()
            };
            let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let step = (*m / c1) / ((*v / c2).sqrt() + eps);
                *w = *w * decay - lr_f * step;
            }
        }
    }
}

/// Scale gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.sq_norm().to_f64().unwrap_or(f64::NAN))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = F::lit(max_norm / (norm + 1e-12));
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,loss,lr,grad_norm";

impl StepStats {
    pub fn csv_row(&self) -> String {
        format!("{},{:.8},{:.8e},{:.6}", self.step, self.loss, self.lr, self.grad_norm)
    }
}

/// Callbacks fired during [`Trainer::run`].
pub trait TrainObserver<F: Scalar> {
    fn on_step(&mut self, _stats: &StepStats) -> Result<()> {
        Ok(())
    }

    /// Fired every `eval_every` steps after the update.
    fn on_eval(&mut self, _trainer: &Trainer<F>) -> Result<()> {
        Ok(())
    }
}

/// Observer that only records the loss curve.
#[derive(Debug, Default)]
pub struct NoObserver;

impl<F: Scalar> TrainObserver<F> for NoObserver {}

/// Writes one CSV row per step.
pub struct CsvMetrics<W: Write> {
    out: W,
}

impl<W: Write> CsvMetrics<W> {
    pub fn new(mut out: W, write_header: bool) -> Result<Self> {
        if write_header {
            writeln!(out, "{METRICS_HEADER}")?;
        }
        Ok(Self { out })
    }
}

impl<F: Scalar, W: Write> TrainObserver<F> for CsvMetrics<W> {
    fn on_step(&mut self, stats: &StepStats) -> Result<()> {
        writeln!(self.out, "{}", stats.csv_row())?;
        Ok(())
    }
}

pub struct Trainer<F: Scalar> {
    pub model: Model<F>,
    pub config: TrainConfig,
    pub optimizer: AdamW<F>,
    /// Number of completed steps.
    pub step: usize,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: Model<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(&model);
        Ok(Self {
            model,
            config,
            optimizer,
            step: 0,
        })
    }

    /// Indices of the examples forming the batch for `step`; depends only on
    /// the seed and the step number.
    pub fn batch_indices(&self, step: usize, dataset_len: usize) -> Vec<usize> {
        let mixed = self.config.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(mixed);
        (0..self.config.batch_size)
            .map(|_| rng.gen_range(0..dataset_len))
            .collect()
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &PackedBatch<F>) -> Result<StepStats> {
        let (loss, slots) = self.model.loss_and_gradients(batch)?;
        let loss = loss.to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                param_norm: self.model.param_norm(),
            });
        }
        let mut grads: Vec<Tensor<F>> = slots.into_iter().map(|s| s.grad).collect();
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                param_norm: self.model.param_norm(),
            });
        }
        let lr = self.config.lr_at(self.step);
        self.optimizer
            .update(&mut self.model, &grads, lr, self.config.weight_decay);
        let stats = StepStats {
            step: self.step,
            loss,
            lr,
            grad_norm,
        };
        self.step += 1;
        Ok(stats)
    }

    /// Train until `config.steps` steps have completed.
    pub fn run<E: Example>(&mut self, data: &[E], observer: &mut dyn TrainObserver<F>) -> Result<Vec<StepStats>> {
        if data.is_empty() {
            return Err(Error::Invalid("training dataset is empty".into()));
        }
        let mut curve = Vec::with_capacity(self.config.steps.saturating_sub(self.step));
        while self.step < self.config.steps {
            let idx = self.batch_indices(self.step, data.len());
            let batch = PackedBatch::from_pairs(idx.iter().map(|&i| (data[i].prompt(), data[i].target())))?;
            let stats = self.train_step(&batch)?;
            observer.on_step(&stats)?;
            curve.push(stats);
            if self.config.eval_every > 0 && self.step % self.config.eval_every == 0 {
                observer.on_eval(self)?;
            }
        }
        Ok(curve)
    }

    /// Optimizer moments as named tensors, for checkpointing.
    pub fn optimizer_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, p) in self.model.params().iter().enumerate() {
            out.push((format!("optim.m.{}", p.name), self.optimizer.first[i].cast()));
            out.push((format!("optim.v.{}", p.name), self.optimizer.second[i].cast()));
        }
        out
    }

    /// Restore optimizer moments and the step counter saved by
    /// [`Trainer::optimizer_tensors`].
    pub fn restore(&mut self, step: usize, adam_t: u64, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
        let lookup: BTreeMap<&str, &Tensor<f32>> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (i, p) in self.model.params().iter().enumerate() {
            for (prefix, slot) in [("optim.m.", &mut self.optimizer.first[i]), ("optim.v.", &mut self.optimizer.second[i])] {
                let name = format!("{prefix}{}", p.name);
                let t = lookup
                    .get(name.as_str())
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {name}")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
                }
                *slot = t.cast();
            }
        }
        self.step = step;
        self.optimizer.t = adam_t;
        Ok(())
    }
}

/// Train `model` on `data` and return it with its loss curve.
pub fn train<F: Scalar, E: Example>(
    model: Model<F>,
    data: &[E],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver<F>,
) -> Result<(Model<F>, Vec<StepStats>)> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let curve = trainer.run(data, observer)?;
    Ok((trainer.model, curve))
}

/// A model that continues prompts.
pub trait SequenceModel: Sync {
    /// Prompt followed by up to `max_new` generated tokens.
    fn generate(&self, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>>;

    /// Whether greedy generation reproduces `target` token for token.
    fn reproduces(&self, prompt: &[TokenId], target: &[TokenId]) -> Result<bool> {
        let out = self.generate(prompt, target.len())?;
        Ok(out.get(prompt.len()..) == Some(target))
    }
}

impl<F: Scalar> SequenceModel for Model<F> {
    fn generate(&self, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
        Ok(Model::generate(self, prompt, max_new)?.tokens)
    }

    fn reproduces(&self, prompt: &[TokenId], target: &[TokenId]) -> Result<bool> {
        self.greedy_reproduces(prompt, target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketAccuracy {
    pub length: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub buckets: Vec<BucketAccuracy>,
    /// Lengths up to this value count as in-domain.
    pub train_max_len: usize,
    pub in_domain: Option<f64>,
    pub out_of_domain: Option<f64>,
    pub overall: f64,
    pub examples: usize,
}

impl EvalReport {
    pub fn bucket(&self, length: usize) -> Option<&BucketAccuracy> {
        self.buckets.iter().find(|b| b.length == length)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("length,correct,total,accuracy\n");
        for b in &self.buckets {
            s.push_str(&format!("{},{},{},{:.6}\n", b.length, b.correct, b.total, b.accuracy));
        }
        s
    }
}

/// Exact-match accuracy bucketed by example length. Aggregates are
/// unweighted means over examples.
pub fn evaluate_exact<M: SequenceModel + ?Sized, E: Example>(
    model: &M,
    data: &[E],
    train_max_len: usize,
) -> Result<EvalReport> {
    let hits: Vec<bool> = data
        .par_iter()
        .map(|e| model.reproduces(e.prompt(), e.target()))
        .collect::<Result<_>>()?;
    let mut buckets: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let (mut in_d, mut out_d) = ((0usize, 0usize), (0usize, 0usize));
    for (e, &hit) in data.iter().zip(&hits) {
        let b = buckets.entry(e.length()).or_default();
        b.0 += hit as usize;
        b.1 += 1;
        let agg = if e.length() <= train_max_len { &mut in_d } else { &mut out_d };
        agg.0 += hit as usize;
        agg.1 += 1;
    }
    let ratio = |(c, t): (usize, usize)| (t > 0).then(|| c as f64 / t as f64);
    let correct = hits.iter().filter(|&&h| h).count();
    Ok(EvalReport {
        buckets: buckets
            .into_iter()
            .map(|(length, (correct, total))| BucketAccuracy {
                length,
                correct,
                total,
                accuracy: correct as f64 / total as f64,
            })
            .collect(),
        train_max_len,
        in_domain: ratio(in_d),
        out_of_domain: ratio(out_d),
        overall: if data.is_empty() { 0.0 } else { correct as f64 / data.len() as f64 },
        examples: data.len(),
    })
}
