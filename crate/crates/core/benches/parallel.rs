use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use unitcraft::eval::{self, EvalConfig};
use unitcraft::model::{ModelConfig, UnitTransformer};
use unitcraft::offline_env;
use unitcraft::scenegen::{self, GenConfig};
use unitcraft::segmentation::{self, EdhInstance, UnitInstance};
use unitcraft::world::WorldConfig;

fn corpus(n: usize) -> (Vec<UnitInstance>, Vec<EdhInstance>) {
    let wc = WorldConfig::default();
    let mut units = Vec::new();
    let mut whole = Vec::new();
    for i in 0..n {
        let s = scenegen::generate_session(&GenConfig {
            rng_seed: scenegen::mix_seed(19980417, i as u64),
            ..GenConfig::default()
        })
        .unwrap();
        units.extend(segmentation::segment_units(&s, &wc).unwrap());
        whole.push(segmentation::whole_session(&s, &wc).unwrap());
    }
    (units, whole)
}

fn stores(c: &mut Criterion) {
    let (units, _) = corpus(40);
    let wc = WorldConfig::default();
    let mut g = c.benchmark_group("build_stores");
    g.bench_function("sequential", |b| {
        b.iter(|| offline_env::build_stores_sequential(black_box(&units), &wc).unwrap())
    });
    g.bench_function("parallel", |b| b.iter(|| offline_env::build_stores(black_box(&units), &wc).unwrap()));
    g.finish();
}

fn rollouts(c: &mut Criterion) {
    let (_, whole) = corpus(16);
    let model = UnitTransformer::new(ModelConfig {
        d_model: 32,
        ffn: 64,
        ..ModelConfig::default()
    })
    .unwrap();
    let cfg = EvalConfig {
        min_cap: 20,
        ..EvalConfig::default()
    };
    let mut g = c.benchmark_group("eval_rollouts");
    g.sample_size(10);
    g.bench_function("sequential", |b| {
        b.iter(|| eval::rollout_model_sequential(&model, black_box(&whole), &cfg).unwrap())
    });
    g.bench_function("parallel", |b| b.iter(|| eval::rollout_model(&model, black_box(&whole), &cfg).unwrap()));
    g.finish();
}

criterion_group!(benches, stores, rollouts);
criterion_main!(benches);
