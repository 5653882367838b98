//! Shared fixtures for the benchmarks.

use repo_attn::model::PackedBatch;
use repo_attn::tasks::{gen_reversal_split, vocab, ReversalExample};
use repo_attn::{Model, ModelConfig, Schedule};

/// The default desk-scale model for a schedule.
pub fn toy_model(schedule: Schedule, seed: u64) -> Model<f32> {
    Model::new(ModelConfig::toy(vocab::SIZE, schedule), seed).expect("toy config is valid")
}

pub fn reversal_examples(count: usize, seed: u64) -> Vec<ReversalExample> {
    gen_reversal_split(seed, count, (2, 20), &vocab::symbols(), 80).expect("valid lengths")
}

pub fn packed(examples: &[ReversalExample]) -> PackedBatch<f32> {
    PackedBatch::from_pairs(examples.iter().map(|e| (&e.prompt[..], &e.target[..]))).expect("non-empty batch")
}
