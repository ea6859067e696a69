//! Contracts for the warp pipeline and the color ops.

use augerino_core::tensor::{Tape, Tensor};
use augerino_core::warp::{rotation_matrix, warp_tensor};
use augerino_core::Error;

fn apply_brightness(x: &Tensor, t: f64) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let tv = tape.constant(Tensor::scalar(t)).unwrap();
    let out = tape.brightness(xv, tv).unwrap();
    tape.value(out).clone()
}

fn apply_contrast(x: &Tensor, t: f64) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let tv = tape.constant(Tensor::scalar(t)).unwrap();
    let out = tape.contrast(xv, tv).unwrap();
    tape.value(out).clone()
}

#[test]
fn brightness_additive_and_clamped() {
    let x = Tensor::new(vec![1, 1, 3], vec![100.0, 250.0, 3.0]).unwrap();
    let out = apply_brightness(&x, 50.0);
    assert_eq!(out.data, vec![150.0, 255.0, 53.0]);
    let out = apply_brightness(&x, -10.0);
    assert_eq!(out.data, vec![90.0, 240.0, 0.0]);
    // t = 0 leaves the image bit-identical
    let out = apply_brightness(&x, 0.0);
    assert_eq!(out.data, x.data);
}

#[test]
fn brightness_gradient_is_indicator_of_unclamped() {
    // d out / d t is 1 per unclamped pixel and 0 per clamped one.
    let x = Tensor::new(vec![1, 1, 3], vec![100.0, 250.0, 3.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let tv = tape.leaf(&Tensor::scalar(50.0).param()).unwrap();
    let out = tape.brightness(xv, tv).unwrap();
    let s = tape.sum(out).unwrap();
    tape.backward(s).unwrap();
    // pixels 100 and 3 shift freely, 250 saturates at 255
    assert_eq!(tape.grad(tv).unwrap()[0], 2.0);
}

#[test]
fn contrast_identity_fixed_point_and_example() {
    let ints: Vec<f64> = vec![0.0, 37.0, 128.0, 200.0, 255.0];
    let x = Tensor::new(vec![1, 1, 5], ints.clone()).unwrap();
    // t = 0 gives F = 1 exactly; integer intensities survive bit-exactly
    let out = apply_contrast(&x, 0.0);
    assert_eq!(out.data, ints);
    // c = 128 is the fixed point for any valid t
    for &t in &[-200.0, -50.0, 0.0, 50.0, 128.0, 258.0] {
        let out = apply_contrast(&x, t);
        assert_eq!(out.data[2], 128.0);
    }
    // worked example: t = 128, c = 228 saturates at 255
    let out = apply_contrast(&x, 128.0);
    assert_eq!(out.data[3], 255.0);
    let f: f64 = 259.0 * (128.0 + 255.0) / (255.0 * (259.0 - 128.0));
    assert!((f - 2.9692).abs() < 1e-3);
}

#[test]
fn contrast_rejects_pole() {
    let x = Tensor::new(vec![1, 1, 1], vec![10.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let tv = tape.constant(Tensor::scalar(259.0)).unwrap();
    assert!(matches!(tape.contrast(xv, tv), Err(Error::Domain(_))));
}

#[test]
fn color_ops_monotone_in_intensity() {
    let ints: Vec<f64> = (0..=255).map(|v| v as f64).collect();
    let x = Tensor::new(vec![1, 1, 256], ints).unwrap();
    for &t in &[-80.0, 40.0] {
        let out = apply_brightness(&x, t);
        assert!(out.data.windows(2).all(|w| w[0] <= w[1]));
    }
    for &t in &[-100.0, 60.0, 200.0] {
        let out = apply_contrast(&x, t);
        assert!(out.data.windows(2).all(|w| w[0] <= w[1]));
    }
}

fn disk_image(size: usize) -> Tensor {
    augerino_core::data::render(size, |x, y| {
        let r = (x * x + y * y).sqrt();
        (-(r - 0.4) * (r - 0.4) / 0.02).exp()
    })
}

#[test]
fn identity_warp_reproduces_input() {
    let x = disk_image(15);
    let out = warp_tensor(&x, &Tensor::eye(3)).unwrap();
    let err = x
        .data
        .iter()
        .zip(&out.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-12);
}

#[test]
fn out_of_bounds_grid_samples_zero() {
    let x = disk_image(9);
    // translate far beyond the source square: every tap lands outside
    let mut g = Tensor::eye(3);
    g.data[2] = 5.0;
    let out = warp_tensor(&x, &g).unwrap();
    assert!(out.data.iter().all(|&v| v == 0.0));
}

#[test]
fn quarter_turn_round_trip() {
    let x = disk_image(17);
    let fwd = warp_tensor(&x, &rotation_matrix(std::f64::consts::FRAC_PI_2)).unwrap();
    let back = warp_tensor(&fwd, &rotation_matrix(-std::f64::consts::FRAC_PI_2)).unwrap();
    // compare away from the border, where the round trip never leaves
    // the source square
    let n = 17;
    let mut worst = 0.0f64;
    for i in 2..n - 2 {
        for j in 2..n - 2 {
            worst = worst.max((x.data[i * n + j] - back.data[i * n + j]).abs());
        }
    }
    assert!(worst < 0.1, "round-trip interior error {worst}");
}

#[test]
fn constant_image_interior_preserved_under_rotation() {
    let n = 21;
    let x = Tensor::new(vec![1, n, n], vec![1.0; n * n]).unwrap();
    let out = warp_tensor(&x, &rotation_matrix(0.3)).unwrap();
    // pixels whose source taps stay inside the square keep value 1, since
    // bilinear weights form a partition of unity
    let c = (n as f64 - 1.0) / 2.0;
    for i in 0..n {
        for j in 0..n {
            let (dy, dx) = (i as f64 - c, j as f64 - c);
            if (dx * dx + dy * dy).sqrt() < c - 1.5 {
                assert!(
                    (out.data[i * n + j] - 1.0).abs() <= 1e-6,
                    "interior pixel ({i},{j}) = {}",
                    out.data[i * n + j]
                );
            }
        }
    }
}

#[test]
fn warp_composition_matches_composed_transform() {
    let x = disk_image(33);
    let g = rotation_matrix(0.35);
    let h = rotation_matrix(0.2);
    let two_step = warp_tensor(&warp_tensor(&x, &g).unwrap(), &h).unwrap();
    // warp(warp(x, g), h)(p) = x(g h p), so compose as g * h
    let mut gh = Tensor::zeros(vec![3, 3]);
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                gh.data[i * 3 + j] += g.data[i * 3 + k] * h.data[k * 3 + j];
            }
        }
    }
    let one_step = warp_tensor(&x, &gh).unwrap();
    let n = 33;
    let mut worst = 0.0f64;
    for i in 4..n - 4 {
        for j in 4..n - 4 {
            worst = worst.max((two_step.data[i * n + j] - one_step.data[i * n + j]).abs());
        }
    }
    assert!(worst < 0.1, "composition interior error {worst}");
}
