use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sled_core::autodiff::Graph;
use sled_core::mmdit::{Hooks, ModelInput};
use sled_core::pps::{pps_loss, NoisySample, SuppressionContext};
use sled_core::{init_adapter, AdapterMode, EditWorld, EditorModel, ModelConfig, Tensor, WorldSpec};

fn matmul(c: &mut Criterion) {
    sled_core::runtime::retain_freed_memory();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::randn([152, 64], 1.0, &mut rng);
    let b = Tensor::randn([64, 64], 1.0, &mut rng);
    c.bench_function("matmul 152x64x64 forward+backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.param(a.clone()).unwrap();
            let w = g.param(b.clone()).unwrap();
            let y = g.matmul(x, w).unwrap();
            let loss = g.reduce_sum(y).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn model(c: &mut Criterion) {
    let config = ModelConfig::default();
    let world = EditWorld::generate(&WorldSpec::default()).unwrap();
    let model = EditorModel::init(&config, 0).unwrap();
    let ex = world.sample_example(2, 1).unwrap();
    let tokens = model.encode(&ex.prompt, &world.vocabulary()).unwrap();
    let z = Tensor::randn(config.grid.dims(), 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let input = ModelInput {
        noisy: &z,
        source: &ex.x_orig,
        tokens: &tokens,
        t: 0.4,
    };
    c.bench_function("editor forward (default config)", |bench| {
        bench.iter(|| black_box(model.predict_velocity(&input, None, None).unwrap()))
    });
    c.bench_function("editor forward+backward (default config)", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let p = model.bind(&mut g, true).unwrap();
            let v = model.forward(&mut g, &p, &input, &Hooks::default()).unwrap();
            let loss = g.reduce_mean(v).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });

    let adapter = init_adapter(&config, AdapterMode::StLora, 16, 0).unwrap();
    let ctx = SuppressionContext::new(&model, &world);
    let sample = NoisySample {
        z: &z,
        x_orig: &ex.x_orig,
        t: 0.4,
    };
    c.bench_function("suppression loss + adapter gradients", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let bound = adapter.bind(&mut g, true).unwrap();
            let loss = pps_loss(&mut g, &ctx, &adapter, &bound, &sample, &ex.prompt, 0).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = matmul, model
}
criterion_main!(benches);
