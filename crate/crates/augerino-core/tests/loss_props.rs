//! Loss-linearity identity and Monte Carlo estimator unbiasedness.

use augerino_core::lie::GeneratorBasis;
use augerino_core::model::{AugerinoModel, Mode, Target};
use augerino_core::network::{Head, Network, NetworkSpec};
use augerino_core::tensor::{Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_logp(rng: &mut ChaCha8Rng, b: usize, c: usize) -> Tensor {
    let data = (0..b * c).map(|_| rng.gen_range(-4.0..0.0)).collect();
    Tensor::new(vec![b, c], data).unwrap()
}

fn nll_of(t: &Tensor, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(t.clone()).unwrap();
    let l = tape.nll(v, labels).unwrap();
    tape.value(l).data[0]
}

#[test]
fn nll_is_linear_in_log_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0009);
    let (b, c) = (5, 4);
    for _ in 0..20 {
        let p = random_logp(&mut rng, b, c);
        let q = random_logp(&mut rng, b, c);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        for &alpha in &[0.0, 0.25, 0.5, 1.0] {
            let mix = Tensor::new(
                vec![b, c],
                p.data
                    .iter()
                    .zip(&q.data)
                    .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
                    .collect(),
            )
            .unwrap();
            let lhs = nll_of(&mix, &labels);
            let rhs = alpha * nll_of(&p, &labels) + (1.0 - alpha) * nll_of(&q, &labels);
            assert!(
                (lhs - rhs).abs() <= 1e-12,
                "alpha={alpha}: {lhs} vs {rhs}"
            );
        }
    }
}

#[test]
fn nll_of_average_equals_average_of_nlls_on_tape() {
    // Same identity expressed with tape ops (the path training uses).
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_000a);
    let (b, c) = (3, 5);
    let p = random_logp(&mut rng, b, c);
    let q = random_logp(&mut rng, b, c);
    let labels = vec![1usize, 4, 0];
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone()).unwrap();
    let qv = tape.constant(q.clone()).unwrap();
    let sum = tape.add(pv, qv).unwrap();
    let avg = tape.scale_const(sum, 0.5).unwrap();
    let l_avg = tape.nll(avg, &labels).unwrap();
    let lp = tape.nll(pv, &labels).unwrap();
    let lq = tape.nll(qv, &labels).unwrap();
    let lhs = tape.value(l_avg).data[0];
    let rhs = 0.5 * (tape.value(lp).data[0] + tape.value(lq).data[0]);
    assert!((lhs - rhs).abs() <= 1e-12);
}

fn tiny_model(seed: u64) -> AugerinoModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = NetworkSpec::cnn_small((1, 16, 16), 3, 4, 8, 3, Head::LogProb);
    let net = Network::build(spec, &mut rng).unwrap();
    let mut m = AugerinoModel::new(net, GeneratorBasis::affine2d(), 0.4, Mode::InvariantClassify, 0.0);
    m.n_copies_train = 1;
    m
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let data = (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::new(vec![1, size, size], data).unwrap()
}

/// A k-copy classification loss equals the k-sample mean of 1-copy losses
/// in expectation, so a long 1-copy Monte Carlo average must agree with a
/// single many-copy loss within sampling error.
#[test]
fn single_sample_estimator_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_000b);
    let mut model = tiny_model(7);
    let x = random_image(&mut rng, 16);
    let inputs = [&x];
    let targets = [Target::Label(1usize)];

    // many-copy reference on one tape
    model.n_copies_train = 2000;
    let mut tape = Tape::new();
    let reg = model.register(&mut tape).unwrap();
    let mut rng_many = ChaCha8Rng::seed_from_u64(100);
    let (loss, _) = model
        .train_loss(&mut tape, &reg, &inputs, &targets, &mut rng_many)
        .unwrap();
    let many = tape.value(loss).data[0];

    // 1-copy Monte Carlo stream
    model.n_copies_train = 1;
    let n = 10_000usize;
    let mut rng_mc = ChaCha8Rng::seed_from_u64(200);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut tape = Tape::new();
        let reg = model.register(&mut tape).unwrap();
        let (loss, _) = model
            .train_loss(&mut tape, &reg, &inputs, &targets, &mut rng_mc)
            .unwrap();
        samples.push(tape.value(loss).data[0]);
    }
    let mean: f64 = samples.iter().sum::<f64>() / n as f64;
    let var: f64 =
        samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n as f64 - 1.0);
    // the many-copy value is itself a 2000-sample estimate, with caveat:
    // log of averaged probabilities has smaller variance than the mean of
    // logs, so its own SE is bounded by the 1-copy SE scaled accordingly
    let se = (var / n as f64 + var / 2000.0).sqrt();
    assert!(
        (mean - many).abs() <= 3.0 * se,
        "MC mean {mean} vs many-copy {many}, 3 SE = {}",
        3.0 * se
    );
}
