//! Lie-algebra generator bases, the differentiable matrix exponential, and
//! reparameterized sampling of affine transformations.
//!
//! A transform is drawn as exp(sum_i eps_i * softplus(theta_raw_i) * G_i)
//! with eps uniform on [-1, 1]^k, so gradients reach the raw widths through
//! the exponential itself.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{softplus, Tape, Tensor, Var};

/// Basis of generator matrices for the affine group.
#[derive(Clone, Debug)]
pub struct GeneratorBasis {
    pub dim: usize,
    pub matrices: Vec<Tensor>,
}

impl GeneratorBasis {
    /// The six 2D generators: x/y translation, rotation, isotropic and
    /// anisotropic scaling, shear. Homogeneous 3x3, last row zero.
    pub fn affine2d() -> Self {
        let g = |rows: [[f64; 3]; 3]| {
            Tensor::new(vec![3, 3], rows.iter().flatten().cloned().collect()).unwrap()
        };
        let matrices = vec![
            g([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
            g([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]),
            g([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
            g([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]),
            g([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 0.0]]),
            g([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
        ];
        GeneratorBasis { dim: 3, matrices }
    }

    /// The nine 3D generators: 3 translations, 3 rotations, 2 squeezes and
    /// 1 uniform scaling, on 4x4 homogeneous matrices.
    pub fn affine3d() -> Self {
        let mut matrices = Vec::with_capacity(9);
        // translations
        for axis in 0..3 {
            let mut t = Tensor::zeros(vec![4, 4]);
            t.data[axis * 4 + 3] = 1.0;
            matrices.push(t);
        }
        // rotations about z, y, x
        for (i, j) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let mut t = Tensor::zeros(vec![4, 4]);
            t.data[i * 4 + j] = -1.0;
            t.data[j * 4 + i] = 1.0;
            matrices.push(t);
        }
        // squeezes
        let mut s1 = Tensor::zeros(vec![4, 4]);
        s1.data[0] = 1.0;
        s1.data[5] = -1.0;
        matrices.push(s1);
        let mut s2 = Tensor::zeros(vec![4, 4]);
        s2.data[5] = 1.0;
        s2.data[10] = -1.0;
        matrices.push(s2);
        // uniform scale
        let mut sc = Tensor::zeros(vec![4, 4]);
        sc.data[0] = 1.0;
        sc.data[5] = 1.0;
        sc.data[10] = 1.0;
        matrices.push(sc);
        GeneratorBasis { dim: 4, matrices }
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    /// Upper bounds for the softplus pre-activations of the widths, one per
    /// generator. Rotation widths may reach just past pi (a uniform rotation
    /// width of pi already covers the whole circle); the remaining widths
    /// stop near 1, where translations leave the frame and exponential
    /// scales/shears have already destroyed the content of a small image.
    /// Without bounds, a strongly regularized width with a saturating data
    /// term runs away and shields the others from the data term entirely.
    pub fn raw_width_caps(&self) -> Vec<f64> {
        const ROTATION_CAP: f64 = 3.47; // softplus(3.47) slightly above pi
        const BOUNDED_CAP: f64 = 0.55; // softplus(0.55) slightly above 1
        let rotations: &[usize] = if self.dim == 3 { &[2] } else { &[3, 4, 5] };
        (0..self.matrices.len())
            .map(|i| {
                if rotations.contains(&i) {
                    ROTATION_CAP
                } else {
                    BOUNDED_CAP
                }
            })
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

/// Raw (pre-softplus) widths of the uniform distribution over generator
/// coefficients.
#[derive(Clone, Debug)]
pub struct AugParams {
    pub theta_raw: Tensor,
}

impl AugParams {
    /// All generators start at the given width (post-softplus).
    pub fn with_width(k: usize, width: f64) -> Self {
        let raw = crate::tensor::softplus_inverse(width);
        AugParams {
            theta_raw: Tensor::new(vec![k], vec![raw; k]).unwrap().param(),
        }
    }

    pub fn widths(&self) -> Vec<f64> {
        self.theta_raw.data.iter().map(|&r| softplus(r)).collect()
    }
}

/// Positive widths from raw parameters, overflow-safe.
pub fn softplus_width(theta_raw: &[f64]) -> Vec<f64> {
    theta_raw.iter().map(|&r| softplus(r)).collect()
}

/// k i.i.d. samples from U[-1, 1]. Randomness enters the model only here.
pub fn sample_eps<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

const EXPM_TAYLOR_DEGREE: usize = 12;

/// Differentiable matrix exponential by scaling-and-squaring over a
/// degree-12 Taylor polynomial. Gradients reuse the same arithmetic.
pub fn expm(tape: &mut Tape, a: Var) -> Result<Var> {
    let shape = tape.value(a).shape.clone();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Dimension(format!("expm expects a square matrix, got {shape:?}")));
    }
    let n = shape[0];
    // 1-norm (max column abs sum) decides the number of squarings
    let norm = {
        let d = &tape.value(a).data;
        let mut best = 0.0f64;
        for j in 0..n {
            let mut col = 0.0;
            for i in 0..n {
                col += d[i * n + j].abs();
            }
            best = best.max(col);
        }
        best
    };
    let s = if norm > 1.0 {
        norm.log2().ceil() as usize
    } else {
        0
    };
    let b = tape.scale_const(a, 0.5f64.powi(s as i32))?;
    let eye = tape.constant(Tensor::eye(n))?;
    // Horner form: I + B(I + B/2 (I + B/3 (...)))
    let mut acc = eye;
    for d in (1..=EXPM_TAYLOR_DEGREE).rev() {
        let prod = tape.matmul(b, acc)?;
        let scaled = tape.scale_const(prod, 1.0 / d as f64)?;
        acc = tape.add(eye, scaled)?;
    }
    for _ in 0..s {
        acc = tape.matmul(acc, acc)?;
    }
    Ok(acc)
}

/// Non-tape convenience wrapper around [`expm`].
pub fn expm_matrix(a: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(a.clone())?;
    let e = expm(&mut tape, v)?;
    Ok(tape.value(e).clone())
}

fn generator_combination(
    tape: &mut Tape,
    theta_raw: Var,
    basis: &GeneratorBasis,
    eps: &[f64],
    sign: f64,
) -> Result<Var> {
    if eps.len() != basis.len() {
        return Err(Error::ShapeMismatch {
            op: "sample_affine",
            left: vec![eps.len()],
            right: vec![basis.len()],
        });
    }
    if tape.value(theta_raw).numel() != basis.len() {
        return Err(Error::ShapeMismatch {
            op: "sample_affine",
            left: tape.value(theta_raw).shape.clone(),
            right: vec![basis.len()],
        });
    }
    let theta = tape.softplus(theta_raw)?;
    let n = basis.dim;
    let mut acc = tape.constant(Tensor::zeros(vec![n, n]))?;
    for (i, gmat) in basis.matrices.iter().enumerate() {
        let th_i = tape.index_scalar(theta, i)?;
        let gvar = tape.constant(gmat.clone())?;
        let scaled = tape.mul_scalar(gvar, th_i)?;
        let term = tape.scale_const(scaled, sign * eps[i])?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// g_eps = exp(sum_i eps_i * softplus(theta_raw_i) * G_i).
pub fn sample_affine(
    tape: &mut Tape,
    theta_raw: Var,
    basis: &GeneratorBasis,
    eps: &[f64],
) -> Result<Var> {
    let alg = generator_combination(tape, theta_raw, basis, eps, 1.0)?;
    expm(tape, alg)
}

/// exp(-sum_i eps_i * theta_i * G_i); exact inverse of `sample_affine` at
/// the same eps.
pub fn inverse_of_sample(
    tape: &mut Tape,
    theta_raw: Var,
    basis: &GeneratorBasis,
    eps: &[f64],
) -> Result<Var> {
    let alg = generator_combination(tape, theta_raw, basis, eps, -1.0)?;
    expm(tape, alg)
}

/// Negative L2 regularizer on the post-softplus widths: -sum_i theta_i^2.
pub fn regularizer_neg_l2(tape: &mut Tape, theta_raw: Var) -> Result<Var> {
    let theta = tape.softplus(theta_raw)?;
    let sq = tape.square(theta)?;
    let s = tape.sum(sq)?;
    tape.scale_const(s, -1.0)
}

/// Gaussian rotation + translation parameterization: t ~ N(mu, L L^T) with
/// A(t) a rotation by t1 plus translation (2 t2/(w+h), 2 t3/(w+h)).
#[derive(Clone, Debug)]
pub struct GaussianAugParams {
    pub mu: Tensor,         // 3
    pub scale_tril: Tensor, // 3x3 lower triangular
}

impl GaussianAugParams {
    pub fn new(mu: [f64; 3], scale_tril: [[f64; 3]; 3]) -> Self {
        GaussianAugParams {
            mu: Tensor::new(vec![3, 1], mu.to_vec()).unwrap().param(),
            scale_tril: Tensor::new(vec![3, 3], scale_tril.iter().flatten().cloned().collect())
                .unwrap()
                .param(),
        }
    }
}

/// Samples A(t) with t = mu + L z, z standard normal, differentiable with
/// respect to mu and L.
pub fn sample_gaussian_affine<R: Rng>(
    tape: &mut Tape,
    mu: Var,
    scale_tril: Var,
    rng: &mut R,
    width: f64,
    height: f64,
) -> Result<Var> {
    let z: Vec<f64> = (0..3).map(|_| standard_normal(rng)).collect();
    let zv = tape.constant(Tensor::new(vec![3, 1], z)?)?;
    let lz = tape.matmul(scale_tril, zv)?;
    let t = tape.add(mu, lz)?;
    tape.rot_trans_affine(t, width, height)
}

/// Box-Muller standard normal draw.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
