use std::sync::Arc;

use advokat::algebra::combine;
use advokat::harness::run_scenario;
use advokat::{Aggregate, AggregateContainer, Kid, KidMode, ScenarioConfig, SubtreeId};
use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

fn votes(options: u64, seed: u64) -> Aggregate {
    Aggregate::from_counts(&(0..options).map(|i| (i * 7 + seed) % 5).collect::<Vec<_>>())
}

fn algebra(c: &mut Criterion) {
    let a = votes(6, 1);
    let b = votes(6, 2);
    c.bench_function("combine/6", |bench| bench.iter(|| combine(black_box(&a), black_box(&b)).unwrap()));
    let a = votes(120, 1);
    let b = votes(120, 2);
    c.bench_function("combine/120", |bench| bench.iter(|| combine(black_box(&a), black_box(&b)).unwrap()));
}

fn containers(c: &mut Criterion) {
    let kid = Kid::from_bytes([0x5a; 20]);
    let child = AggregateContainer::seal(Arc::new(votes(6, 3)), 1, (0, None), (0, None), SubtreeId::new(kid, 160));
    let parent = AggregateContainer::seal(
        Arc::new(votes(6, 4)),
        2,
        (1, Some(child.hash)),
        (1, Some(child.hash)),
        SubtreeId::new(kid, 159),
    );
    c.bench_function("container/hash", |bench| bench.iter(|| black_box(&parent).compute_hash()));
    let bytes = parent.canonical_bytes();
    c.bench_function("container/decode", |bench| {
        bench.iter(|| AggregateContainer::decode(black_box(&bytes), parent.hash).unwrap())
    });
}

fn scenario(c: &mut Criterion) {
    let mut group = c.benchmark_group("scenario");
    group.sample_size(10);
    for n in [16, 64] {
        let config = ScenarioConfig {
            n,
            kid_mode: KidMode::SimulationPk,
            admin_bits: 512,
            repeats: 1,
            ..ScenarioConfig::default()
        };
        group.bench_function(format!("honest/{n}"), |bench| {
            bench.iter_batched(|| config.clone(), |c| run_scenario(c).unwrap().1, BatchSize::PerIteration)
        });
    }
    group.finish();
}

criterion_group!(benches, algebra, containers, scenario);
criterion_main!(benches);
