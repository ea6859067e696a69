//! Finite-difference verification of every differentiable op and of the
//! composite model paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use augerino_core::lie::{expm, regularizer_neg_l2, GeneratorBasis};
use augerino_core::tensor::{grad_check, Tape, Tensor, Var};
use augerino_core::warp::warp_image;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap().param()
}

const TOL: f64 = 1e-6;

#[test]
fn matmul_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let a = rand_tensor(&mut rng, vec![3, 4], 1.0);
        let b = rand_tensor(&mut rng, vec![4, 2], 1.0);
        let bc = b.clone();
        let err = grad_check(
            |t: &mut Tape, x: Var| {
                let bv = t.constant(bc.clone())?;
                let y = t.matmul(x, bv)?;
                t.sum(y)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < TOL, "matmul lhs grad err {err}");
        let ac = a.clone();
        let err = grad_check(
            |t: &mut Tape, x: Var| {
                let av = t.constant(ac.clone())?;
                let y = t.matmul(av, x)?;
                t.sum(y)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < TOL, "matmul rhs grad err {err}");
    }
}

#[test]
fn conv2d_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
        let x = rand_tensor(&mut rng, vec![2, 6, 6], 1.0);
        let k = rand_tensor(&mut rng, vec![3, 2, 3, 3], 1.0);
        let kc = k.clone();
        let err = grad_check(
            |t: &mut Tape, v: Var| {
                let kv = t.constant(kc.clone())?;
                let y = t.conv2d(v, kv, stride, pad)?;
                let y = t.square(y)?;
                t.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < TOL, "conv2d input grad err {err} (s={stride},p={pad})");
        let xc = x.clone();
        let err = grad_check(
            |t: &mut Tape, v: Var| {
                let xv = t.constant(xc.clone())?;
                let y = t.conv2d(xv, v, stride, pad)?;
                let y = t.square(y)?;
                t.sum(y)
            },
            &k,
            1e-5,
        )
        .unwrap();
        assert!(err < TOL, "conv2d kernel grad err {err} (s={stride},p={pad})");
    }
}

#[test]
fn pointwise_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, vec![4, 3], 2.0);
    for (name, f) in [
        ("relu", 0usize),
        ("softplus", 1),
        ("square", 2),
        ("scale", 3),
        ("addc", 4),
    ] {
        let err = grad_check(
            |t: &mut Tape, v: Var| {
                let y = match f {
                    // nudge away from the relu kink
                    0 => {
                        let s = t.add_const(v, 0.123)?;
                        t.relu(s)?
                    }
                    1 => t.softplus(v)?,
                    2 => t.square(v)?,
                    3 => t.scale_const(v, -1.7)?,
                    _ => t.add_const(v, 2.5)?,
                };
                t.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < TOL, "{name} grad err {err}");
    }
}

#[test]
fn reduction_and_shape_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, vec![2, 3, 4], 1.0);
    let err = grad_check(
        |t: &mut Tape, v: Var| {
            let y = t.reshape(v, vec![6, 4])?;
            let y = t.square(y)?;
            t.mean(y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < TOL, "reshape/mean grad err {err}");

    let x = rand_tensor(&mut rng, vec![3, 4, 4], 1.0);
    let err = grad_check(
        |t: &mut Tape, v: Var| {
            let y = t.channels_to_rows(v)?;
            let y = t.log_softmax(y)?;
            let labels = vec![0i64, 1, 2, -1, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, -1];
            t.masked_nll(y, &labels)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < TOL, "channels_to_rows/masked_nll grad err {err}");
}

#[test]
fn classification_loss_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, vec![4, 5], 2.0);
    let err = grad_check(
        |t: &mut Tape, v: Var| {
            let y = t.log_softmax(v)?;
            t.nll(y, &[1, 0, 4, 2])
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < TOL, "log_softmax/nll grad err {err}");

    let p = rand_tensor(&mut rng, vec![4, 1], 1.0);
    let err = grad_check(
        |t: &mut Tape, v: Var| {
            let target = t.constant(Tensor::new(vec![4, 1], vec![0.3, -0.2, 1.1, 0.0]).unwrap())?;
            t.mse(v, target)
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(err < TOL, "mse grad err {err}");
}

#[test]
fn expm_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let a = rand_tensor(&mut rng, vec![3, 3], 1.2);
        let err = grad_check(
            |t: &mut Tape, v: Var| {
                let e = expm(t, v)?;
                let e = t.square(e)?;
                t.sum(e)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < TOL, "expm grad err {err}");
    }
}

#[test]
fn warp_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // gradient w.r.t. the transform through grid generation + sampling
    let mut theta = Tensor::new(vec![6], vec![0.3, -0.2, 0.15, 0.1, -0.25, 0.2]).unwrap();
    theta.requires_grad = true;
    let theta = theta;
    let img = rand_tensor(&mut rng, vec![1, 8, 8], 1.0);
    let imgc = img.clone();
    let err = grad_check(
        |t: &mut Tape, v: Var| {
            let basis = GeneratorBasis::affine2d();
            let mut alg = t.constant(Tensor::zeros(vec![3, 3]))?;
            for (i, gm) in basis.matrices.iter().enumerate() {
                let gv = t.constant(gm.clone())?;
                let s = t.index_scalar(v, i)?;
                let term = t.mul_scalar(gv, s)?;
                alg = t.add(alg, term)?;
            }
            let g = expm(t, alg)?;
            let x = t.constant(imgc.clone())?;
            let y = warp_image(t, x, g)?;
            let y = t.square(y)?;
            t.sum(y)
        },
        &theta,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "warp transform grad err {err}");

    // gradient w.r.t. the image through bilinear sampling
    let g = Tensor::new(
        vec![3, 3],
        vec![0.9, -0.2, 0.1, 0.2, 0.9, -0.05, 0.0, 0.0, 1.0],
    )
    .unwrap();
    let err = grad_check(
        |t: &mut Tape, v: Var| {
            let gv = t.constant(g.clone())?;
            let y = warp_image(t, v, gv)?;
            let y = t.square(y)?;
            t.sum(y)
        },
        &img,
        1e-5,
    )
    .unwrap();
    assert!(err < TOL, "warp image grad err {err}");
}

#[test]
fn color_op_grads() {
    let img = Tensor::new(vec![1, 2, 2], vec![30.0, 100.0, 180.0, 240.0]).unwrap().param();
    // brightness shift parameter, away from clamp corners
    let t0 = Tensor::scalar(5.0).param();
    let imgc = img.clone();
    let err = grad_check(
        |t: &mut Tape, v: Var| {
            let x = t.constant(imgc.clone())?;
            let y = t.brightness(x, v)?;
            let y = t.square(y)?;
            t.sum(y)
        },
        &t0,
        1e-4,
    )
    .unwrap();
    assert!(err < TOL, "brightness grad err {err}");

    let t1 = Tensor::scalar(20.0).param();
    let imgc = img.clone();
    let err = grad_check(
        |t: &mut Tape, v: Var| {
            let x = t.constant(imgc.clone())?;
            let y = t.contrast(x, v)?;
            let y = t.square(y)?;
            t.sum(y)
        },
        &t1,
        1e-4,
    )
    .unwrap();
    assert!(err < TOL, "contrast grad err {err}");
}

#[test]
fn regularizer_grads() {
    let theta = Tensor::new(vec![6], vec![-2.0, -0.5, 0.3, 1.0, 2.0, -3.0])
        .unwrap()
        .param();
    let err = grad_check(
        |t: &mut Tape, v: Var| regularizer_neg_l2(t, v),
        &theta,
        1e-5,
    )
    .unwrap();
    assert!(err < TOL, "regularizer grad err {err}");
}

#[test]
fn network_path_grads_20_seeds() {
    // composite: params -> conv stack -> head -> nll, checked over 20 seeds
    use augerino_core::network::{Head, Network, NetworkSpec};
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = NetworkSpec::cnn_small((1, 8, 8), 2, 3, 5, 3, Head::LogProb);
        let net = Network::build(spec, &mut rng).unwrap();
        let img = rand_tensor(&mut rng, vec![1, 8, 8], 1.0);
        for pi in 0..net.params.len() {
            let netc = net.clone();
            let imgc = img.clone();
            let p = net.params[pi].clone();
            let err = grad_check(
                |t: &mut Tape, v: Var| {
                    let mut vars = Vec::new();
                    for (j, q) in netc.params.iter().enumerate() {
                        if j == pi {
                            vars.push(v);
                        } else {
                            vars.push(t.constant(q.clone())?);
                        }
                    }
                    let x = t.constant(imgc.clone())?;
                    let out = netc.forward(t, &vars, x)?;
                    t.nll(out, &[1])
                },
                &p,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed} param {pi} grad err {err}");
        }
    }
}
