//! Image warping and color transforms built on the tape ops.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Warps an image by a 3x3 homogeneous transform: sampling grid from the
/// transform, then bilinear interpolation with zero padding.
pub fn warp_image(tape: &mut Tape, x: Var, g: Var) -> Result<Var> {
    let shape = tape.value(x).shape.clone();
    let (h, w) = (shape[1], shape[2]);
    let grid = tape.affine_grid(g, h, w)?;
    tape.bilinear_sample(x, grid)
}

/// Plain (non-tape) warp of an image tensor.
pub fn warp_tensor(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let gv = tape.constant(g.clone())?;
    let out = warp_image(&mut tape, xv, gv)?;
    Ok(tape.value(out).clone())
}

/// 3x3 homogeneous rotation matrix for the normalized coordinate grid.
pub fn rotation_matrix(angle: f64) -> Tensor {
    let (s, c) = angle.sin_cos();
    Tensor::new(vec![3, 3], vec![c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]).unwrap()
}

/// Nearest-neighbor warp of an integer label grid; pixels whose source falls
/// outside the image are marked -1 (ignore).
pub fn warp_mask_nearest(mask: &[i64], h: usize, w: usize, g: &Tensor) -> Vec<i64> {
    let m = &g.data;
    let mut out = vec![-1i64; h * w];
    for i in 0..h {
        let v = -1.0 + 2.0 * i as f64 / (h - 1) as f64;
        for j in 0..w {
            let u = -1.0 + 2.0 * j as f64 / (w - 1) as f64;
            let xs = m[0] * u + m[1] * v + m[2];
            let ys = m[3] * u + m[4] * v + m[5];
            let px = (xs + 1.0) * 0.5 * (w - 1) as f64;
            let py = (ys + 1.0) * 0.5 * (h - 1) as f64;
            let xi = px.round() as isize;
            let yi = py.round() as isize;
            if xi >= 0 && xi < w as isize && yi >= 0 && yi < h as isize {
                out[i * w + j] = mask[yi as usize * w + xi as usize];
            }
        }
    }
    out
}
