use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dfa_bench::random_tensor;
use dfa_core::data::{synth_dataset, SynthConfig};
use dfa_core::detection::{loss_terms, total_loss};
use dfa_core::dfa::{DfaConfig, DfaParams};
use dfa_core::params::{Init, ParamStore};
use dfa_core::{Graph, Model, ModelConfig};

fn operators(c: &mut Criterion) {
    let mut group = c.benchmark_group("dfa");
    let x = random_tensor(32, 2304, 1);
    for (name, cfg) in [
        ("dense_conv", DfaConfig::dense(32, 32, 3)),
        ("depthwise_conv", DfaConfig::depthwise(32, 3).with_window(5)),
    ] {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = DfaParams::init(&mut Init::new(&mut store, &mut rng), "op", cfg).unwrap();
        group.bench_function(BenchmarkId::new(name, 2304), |b| b.iter(|| p.conv(&store, black_box(&x)).unwrap()));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = DfaParams::init(&mut Init::new(&mut store, &mut rng), "op", DfaConfig::depthwise(32, 3)).unwrap();
    group.bench_function(BenchmarkId::new("att", 2304), |b| b.iter(|| p.att(&store, black_box(&x)).unwrap()));
    group.finish();
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let (model, store) = Model::new(&cfg, 0).unwrap();
    let video = synth_dataset(&SynthConfig { num_train: 1, num_test: 0, ..Default::default() })
        .unwrap()
        .train
        .remove(0);
    let t = video.len();
    let targets = model.assign(&video.grid_segments(), t).unwrap();

    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("forward", t), |b| {
        b.iter(|| model.predict(&store, black_box(&video.features)).unwrap())
    });
    group.bench_function(BenchmarkId::new("train_step", t), |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = g.input(video.features.clone());
            let fwd = model.forward(&mut g, &store, x).unwrap();
            let terms = loss_terms(&mut g, &fwd.outputs, &targets, &cfg.loss).unwrap();
            let (loss, _) = total_loss(&mut g, &[terms], &cfg.loss).unwrap();
            g.backward(loss).unwrap();
            g.param_grads().count()
        })
    });
    group.finish();
}

criterion_group!(benches, operators, model);
criterion_main!(benches);
