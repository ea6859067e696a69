//! Microbenchmarks for the hot kernels: matrix exponential, bilinear
//! warping, and a full augmented training step.

use augerino_core::data;
use augerino_core::lie::{expm_matrix, GeneratorBasis};
use augerino_core::model::{AugerinoModel, Mode, Target};
use augerino_core::network::{Head, Network, NetworkSpec};
use augerino_core::tensor::{Tape, Tensor};
use augerino_core::warp::{rotation_matrix, warp_tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn bench_expm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut a = Tensor::zeros(vec![3, 3]);
    for v in a.data.iter_mut().take(6) {
        *v = rng.gen_range(-1.0..1.0);
    }
    c.bench_function("expm_3x3", |b| {
        b.iter(|| expm_matrix(black_box(&a)).unwrap())
    });

    // gradient through the exponential, as the width update sees it
    c.bench_function("expm_3x3_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let v = tape.leaf(&a.clone().param()).unwrap();
            let e = augerino_core::lie::expm(&mut tape, v).unwrap();
            let s = tape.sum(e).unwrap();
            tape.backward(s).unwrap();
            black_box(tape.grad(v).unwrap()[0])
        })
    });
}

fn bench_warp(c: &mut Criterion) {
    let ds = data::generate(data::Generator::SoftRotation, 1, 16, 0);
    let x16 = ds.inputs[0].clone();
    let ds = data::generate(data::Generator::SoftRotation, 1, 32, 0);
    let x32 = ds.inputs[0].clone();
    let g = rotation_matrix(0.4);
    c.bench_function("warp_bilinear_16x16", |b| {
        b.iter(|| warp_tensor(black_box(&x16), black_box(&g)).unwrap())
    });
    c.bench_function("warp_bilinear_32x32", |b| {
        b.iter(|| warp_tensor(black_box(&x32), black_box(&g)).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = NetworkSpec::cnn_small((1, 16, 16), 6, 12, 32, 4, Head::LogProb);
    let net = Network::build(spec, &mut rng).unwrap();
    let mut model = AugerinoModel::new(
        net,
        GeneratorBasis::affine2d(),
        0.2,
        Mode::InvariantClassify,
        0.05,
    );
    model.n_copies_train = 1;
    let ds = data::generate(data::Generator::SoftRotation, 16, 16, 0);
    let inputs: Vec<&Tensor> = ds.inputs.iter().collect();
    let targets: Vec<Target> = (0..ds.len()).map(|i| ds.targets.get(i)).collect();
    c.bench_function("train_step_batch16", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let reg = model.register(&mut tape).unwrap();
            let (loss, _) = model
                .train_loss(&mut tape, &reg, &inputs, &targets, &mut rng)
                .unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.value(loss).data[0])
        })
    });
}

criterion_group!(benches, bench_expm, bench_warp, bench_train_step);
criterion_main!(benches);
