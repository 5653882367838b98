use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use repo_attn::model::ForwardOptions;
use repo_attn::tensor::matmul;
use repo_attn::trainer::Trainer;
use repo_attn::{Schedule, Tensor, TrainConfig};
use repo_attn_bench::{packed, reversal_examples, toy_model};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 128, 256] {
        let a = Tensor::<f32>::from_fn(&[n, n], |i| (i as f32 * 0.37).sin());
        let b = Tensor::<f32>::from_fn(&[n, n], |i| (i as f32 * 0.11).cos());
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    let tokens: Vec<u32> = (0..64).map(|i| 6 + (i * 7) % 26).collect();
    for schedule in [Schedule::Rope, Schedule::Nope, Schedule::Repo] {
        let model = toy_model(schedule.clone(), 0);
        group.bench_function(format!("{schedule:?}/64"), |bench| {
            bench.iter(|| model.forward(black_box(&tokens), &ForwardOptions::default()).unwrap())
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let batch = packed(&reversal_examples(32, 1));
    for schedule in [Schedule::Rope, Schedule::Repo] {
        let cfg = TrainConfig {
            steps: usize::MAX,
            batch_size: 32,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(toy_model(schedule.clone(), 0), cfg).unwrap();
        group.bench_function(format!("{schedule:?}/batch32"), |bench| {
            bench.iter(|| trainer.train_step(black_box(&batch)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_forward, bench_train_step);
criterion_main!(benches);
