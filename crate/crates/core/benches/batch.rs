use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use dove::par::Exec;
use dove::trainloop::{Stage, TrainConfig, Trainer};

fn dove_trainer(exec: Exec) -> Trainer {
    let cfg = TrainConfig { batch_size: 8, ..TrainConfig::default() };
    let start = Trainer::new(cfg.clone()).unwrap().checkpoint();
    let mut t = Trainer::from_checkpoint(cfg, &start, Stage::Dove).unwrap();
    t.exec = exec;
    t
}

fn batch_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("dove_batch_step");
    group.sample_size(10);
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        let t = dove_trainer(exec);
        group.bench_function(name, |b| {
            b.iter_batched(|| t.thresholds.clone(), |mut th| t.compute_step(&mut th).unwrap(), BatchSize::SmallInput)
        });
    }
    group.finish();
}

criterion_group!(benches, batch_step);
criterion_main!(benches);
