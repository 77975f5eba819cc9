use criterion::{criterion_group, criterion_main, Criterion};
use speedcast_bench::day_samples;
use speedcast_core::baselines::{naive_forecast, sfc_predict, site_params};
use speedcast_core::layers::{conv2d, lstm_sequence, separable_conv2d, Activation, LstmWeights};
use speedcast_core::{Graph, Tensor};

fn filled(shape: &[usize], step: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64 * step).sin()).collect()).unwrap()
}

fn convolutions(c: &mut Criterion) {
    let x = filled(&[4, 60, 4, 64], 0.37);
    let dw = filled(&[8, 4, 64], 0.11);
    let pw = filled(&[64, 128], 0.05);
    let dense = filled(&[8, 4, 64, 128], 0.03);
    let bias = filled(&[128], 0.7);
    let mut group = c.benchmark_group("a_5 sized conv, forward+backward");
    group.bench_function("separable", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let v: Vec<_> = [&x, &dw, &pw, &bias].iter().map(|t| g.param((*t).clone())).collect();
            let y = separable_conv2d(&mut g, v[0], v[1], v[2], v[3], Activation::Relu).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
        })
    });
    group.bench_function("traditional", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let v: Vec<_> = [&x, &dense, &bias].iter().map(|t| g.param((*t).clone())).collect();
            let y = conv2d(&mut g, v[0], v[1], v[2], Activation::Relu).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
        })
    });
    group.finish();
}

fn recurrence(c: &mut Criterion) {
    let x = filled(&[4, 60, 6], 0.21);
    let (k, r, b) = (filled(&[6, 240], 0.13), filled(&[60, 240], 0.017), filled(&[240], 0.5));
    c.bench_function("LSTM(60) over 60 sites, batch 4, forward+backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let v: Vec<_> = [&x, &k, &r, &b].iter().map(|t| g.param((*t).clone())).collect();
            let w = LstmWeights {
                kernel: v[1],
                recurrent: v[2],
                bias: v[3],
            };
            let y = lstm_sequence(&mut g, v[0], &w).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
        })
    });
}

fn baselines(c: &mut Criterion) {
    let samples = day_samples(60, 4);
    let sites: Vec<String> = (0..60).map(|s| format!("site-{s:03}")).collect();
    let params = site_params::<&[u8]>(&sites, None, 0.5).unwrap();
    c.bench_function("naive forecast, 88 samples", |b| {
        b.iter(|| samples.iter().map(naive_forecast).count())
    });
    let raw: Vec<_> = samples.iter().map(|s| {
        let mut r = s.clone();
        r.scaled = false;
        r
    }).collect();
    c.bench_function("speed-flow forecast, 88 samples", |b| {
        b.iter(|| raw.iter().map(|s| sfc_predict(s, &params, None).unwrap()).count())
    });
}

criterion_group!(benches, convolutions, recurrence, baselines);
criterion_main!(benches);
