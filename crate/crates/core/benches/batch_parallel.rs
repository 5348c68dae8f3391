use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use empo_core::data::{build_dataset, Catalog, StrategyMix, World};
use empo_core::losses::{record_gradient, LossConfig, ReferenceLogProbs};
use empo_core::model::{ModelConfig, ModelParams};
use empo_core::par::Execution;
use empo_core::train::mean_gradient;

fn batch_gradient(c: &mut Criterion) {
    let world = World::new(Catalog::default()).unwrap();
    let records = build_dataset(&world, 32, 11, &StrategyMix::default(), Execution::Sequential)
        .unwrap()
        .records;
    let mc = ModelConfig {
        vocab_size: world.vocab_size(),
        embed_dim: 24,
        num_patches: world.num_cells(),
        context_len: 40,
        num_blocks: 2,
        seed: 1,
    };
    let policy = ModelParams::init(&mc);
    let refs: Vec<_> = records
        .iter()
        .map(|r| ReferenceLogProbs::compute(&policy, r).unwrap())
        .collect();
    let cfg = LossConfig::default();

    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    for batch in [8usize, 32] {
        let items: Vec<usize> = (0..batch).collect();
        for exec in [Execution::Sequential, Execution::Parallel] {
            group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), batch), &items, |b, items| {
                b.iter(|| {
                    mean_gradient(exec, &mc, items, |i| {
                        record_gradient(&policy, &records[i], &refs[i], &cfg)
                    })
                    .unwrap()
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, batch_gradient);
criterion_main!(benches);
