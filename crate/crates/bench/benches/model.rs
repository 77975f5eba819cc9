use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use speedcast_bench::{batch, day_samples};
use speedcast_core::layers::NormMode;
use speedcast_core::train::loss;
use speedcast_core::{evaluate, fit, Graph, Model, ModelSpec, TrainConfig, Variant};

fn canonical_step(c: &mut Criterion) {
    let samples = day_samples(60, 1);
    let b = batch(&samples, 4);
    let mut group = c.benchmark_group("canonical batch of 4");
    group.sample_size(20);
    for variant in [Variant::DclstmT, Variant::DclstmTConv2d] {
        let model = Model::build(ModelSpec::canonical(variant)).unwrap();
        group.bench_function(format!("{} forward+backward", variant.cli_name()), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let fwd = model.forward_graph(&mut g, &b, NormMode::Train, true).unwrap();
                let target = g.constant(b.target.clone());
                let l = loss(&mut g, fwd.output, target, None, 0.0).unwrap();
                g.backward(l).unwrap();
                g.len()
            })
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let samples = day_samples(60, 2);
    let mut model = Model::build(ModelSpec::canonical(Variant::DclstmT)).unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    fit(&mut model, &samples[..8], &samples[8..16], &cfg, |_| {}).unwrap();
    let mut group = c.benchmark_group("inference");
    group.sample_size(10);
    group.bench_function("evaluate one day (88 samples, 60 sites)", |bench| {
        bench.iter(|| evaluate(&model, &samples).unwrap().mae)
    });
    group.finish();
}

fn reduced_epoch(c: &mut Criterion) {
    let samples = day_samples(12, 3);
    let mut spec = ModelSpec::new(Variant::DclstmT, 12, 4);
    spec.filters = [8, 16, 16];
    spec.lstm_units = 16;
    let cfg = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("reduced profile, one epoch over 88 samples", |bench| {
        bench.iter_batched(
            || Model::build(spec.clone()).unwrap(),
            |mut m| fit(&mut m, &samples, &samples[..8], &cfg, |_| {}).unwrap().best_epoch,
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, canonical_step, inference, reduced_epoch);
criterion_main!(benches);
