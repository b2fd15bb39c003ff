use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use veattack_core::alignment::prop1_check;
use veattack_core::numcore::linalg::singular_values;
use veattack_core::toolkit::synth::synth_images;
use veattack_core::{encode, init_weights, pgd_attack, AlignmentWeights, AttackConfig, EncoderConfig, Tensor};

fn bench_encode(c: &mut Criterion) {
    let mut group = c.benchmark_group("encode");
    for layers in [1, 4] {
        let enc = EncoderConfig {
            layers,
            ..Default::default()
        };
        let w = init_weights(&enc, 0, 1.0).unwrap();
        let img = synth_images(1, 0, &Default::default(), &enc).unwrap().remove(0);
        group.bench_with_input(BenchmarkId::from_parameter(layers), &layers, |b, _| {
            b.iter(|| encode(black_box(&img), &w, &enc).unwrap())
        });
    }
    group.finish();
}

fn bench_attack(c: &mut Criterion) {
    let enc = EncoderConfig::default();
    let w = init_weights(&enc, 0, 1.0).unwrap();
    let img = synth_images(1, 0, &Default::default(), &enc).unwrap().remove(0);
    let cfg = AttackConfig {
        steps: 10,
        ..Default::default()
    };
    let mut group = c.benchmark_group("pgd");
    group.sample_size(10);
    group.bench_function("cos_patch_10_steps", |b| {
        b.iter(|| pgd_attack(black_box(&img), &w, &enc, &cfg).unwrap())
    });
    group.finish();
}

fn bench_linalg(c: &mut Criterion) {
    let a = AlignmentWeights::init(64, 96, 0).unwrap();
    c.bench_function("svd_64x96", |b| b.iter(|| singular_values(black_box(a.wa())).unwrap()));
    let clean = Tensor::from_fn(&[16, 64], |i| (i as f64 * 0.37).sin());
    let adv = clean.map(|v| v + 0.01);
    c.bench_function("prop1_check_16x64", |b| {
        b.iter(|| prop1_check(black_box(&clean), black_box(&adv), &a).unwrap())
    });
}

criterion_group!(benches, bench_encode, bench_attack, bench_linalg);
criterion_main!(benches);
