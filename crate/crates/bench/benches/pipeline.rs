use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use kws_core::audio::{FeatureExtractor, Waveform};
use kws_core::train::batch_gradients;
use kws_core::{model, Architecture, ModelParameters, RegularizationConfig, Tensor};

fn tone(len: usize) -> Waveform {
    Waveform::new((0..len).map(|i| 0.3 * (i as f64 * 0.07).sin() + 0.01 * ((i * 7919) % 13) as f64).collect()).unwrap()
}

fn features(n: usize) -> Vec<Tensor> {
    let ex = FeatureExtractor::default();
    (0..n)
        .map(|k| ex.extract_segment(&tone(28_800 - 97 * k)).unwrap().values().clone())
        .collect()
}

fn frontend(c: &mut Criterion) {
    let ex = FeatureExtractor::default();
    let w = tone(28_800);
    c.bench_function("features_1.8s", |b| b.iter(|| ex.extract(&w).unwrap()));
}

fn forward(c: &mut Criterion) {
    let f = features(1).remove(0);
    for heads in [1, 4] {
        let p = ModelParameters::init(Architecture::default().with_heads(heads), 0);
        c.bench_function(&format!("forward_h{heads}"), |b| b.iter(|| model::predict(&p, &f).unwrap()));
    }
}

fn backward(c: &mut Criterion) {
    let f = features(8);
    let labels = [1, 0, 0, 0, 1, 0, 0, 0];
    let p = ModelParameters::init(Architecture::default(), 0);
    let reg = RegularizationConfig::tied(0.1);
    let mut g = c.benchmark_group("batch_gradients");
    g.sample_size(10);
    g.bench_function("batch8_h4", |b| {
        b.iter_batched(|| f.clone(), |f| batch_gradients(&p, &f, &labels, &reg).unwrap(), BatchSize::LargeInput)
    });
    g.finish();
}

criterion_group!(benches, frontend, forward, backward);
criterion_main!(benches);
