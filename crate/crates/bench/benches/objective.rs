use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mmea_bench::fixture;
use mmea_core::train::{TrainConfig, Trainer};

fn objective(c: &mut Criterion) {
    let mut group = c.benchmark_group("objective");
    group.sample_size(20);
    for n in [200, 1000] {
        let f = fixture(n, 64);
        let cfg = TrainConfig {
            d: 64,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(&f.kg1, &f.kg2, &f.init, &cfg).unwrap();
        let batch = f.seeds.train_pairs();
        let negatives = trainer.negatives(&batch, 0).unwrap();
        let params = trainer.init_params();
        group.bench_with_input(BenchmarkId::new("forward", n), &n, |b, _| {
            b.iter(|| {
                trainer
                    .objective(&params, &batch, &negatives, 0, true, false)
                    .loss
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |b, _| {
            b.iter(|| {
                trainer
                    .objective(&params, &batch, &negatives, 0, true, true)
                    .loss
            })
        });
        group.bench_with_input(BenchmarkId::new("embed", n), &n, |b, _| {
            b.iter(|| trainer.embed(&params))
        });
    }
    group.finish();
}

criterion_group!(benches, objective);
criterion_main!(benches);
