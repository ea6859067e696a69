//! Parameter updates: SGD with a cosine schedule, and Adam for the
//! augmentation widths whose gradient scale varies over orders of magnitude.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// lr(e) = lr0 * (1 + cos(pi * e / total)) / 2.
pub fn cosine_lr(lr0: f64, epoch: usize, total: usize) -> f64 {
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

/// Constant lr0, then a cosine tail over the last fifth of training.
/// Decaying the network rate any earlier stalls its co-adaptation to the
/// widening augmentation distribution.
pub fn flat_then_cosine_lr(lr0: f64, epoch: usize, total: usize) -> f64 {
    let tail = total - total / 5;
    if epoch < tail {
        lr0
    } else {
        cosine_lr(lr0, epoch - tail, (total - tail).max(1))
    }
}

/// One SGD step at the given rate; zeroes the gradients after. The global
/// gradient norm is clipped: an extreme augmentation draw can produce a
/// batch gradient large enough to knock the network out of its minimum,
/// after which the widths collapse against the suddenly-bad network.
pub fn sgd_update(params: &mut [&mut Tensor], lr: f64) -> Result<()> {
    const MAX_GRAD_NORM: f64 = 5.0;
    let mut sq = 0.0;
    for (i, p) in params.iter().enumerate() {
        let g = p.grad.as_ref().ok_or(Error::MissingGrad(i))?;
        if g.len() != p.data.len() {
            return Err(Error::MissingGrad(i));
        }
        sq += g.iter().map(|x| x * x).sum::<f64>();
    }
    let scale = if sq.sqrt() > MAX_GRAD_NORM {
        MAX_GRAD_NORM / sq.sqrt()
    } else {
        1.0
    };
    for p in params.iter_mut() {
        let g = p.grad.as_ref().unwrap();
        for (v, gi) in p.data.iter_mut().zip(g) {
            *v -= lr * scale * gi;
        }
        p.grad = None;
    }
    Ok(())
}

/// One SGD step at the cosine-scheduled rate; zeroes the gradients after.
pub fn sgd_cosine_update(
    params: &mut [&mut Tensor],
    lr0: f64,
    epoch: usize,
    total: usize,
) -> Result<()> {
    let lr = cosine_lr(lr0, epoch, total);
    for (i, p) in params.iter_mut().enumerate() {
        let g = p.grad.as_ref().ok_or(Error::MissingGrad(i))?;
        if g.len() != p.data.len() {
            return Err(Error::MissingGrad(i));
        }
        for (v, gi) in p.data.iter_mut().zip(g) {
            *v -= lr * gi;
        }
        p.grad = None;
    }
    Ok(())
}

/// One SGD step on softplus-parameterized widths, preconditioned by the
/// inverse softplus slope so the step equals plain gradient descent on the
/// widths themselves. Raw-space SGD stalls in the softplus tail; normalized
/// optimizers lose the magnitude balance between data and regularizer terms.
pub fn width_sgd_update(theta_raw: &mut Tensor, lr: f64, raw_caps: &[f64]) -> Result<()> {
    let g = theta_raw.grad.as_ref().ok_or(Error::MissingGrad(0))?.clone();
    // Per-step movement cap: batch gradients on the widths are heavy-tailed
    // near the loss wall, and one outlier step can throw a width past the
    // region the network has adapted to. The cap must stay well above the
    // largest systematic per-step drift (regularizer pull), or it truncates
    // the rare large corrective steps more than the steady pull and biases
    // the equilibrium.
    const MAX_STEP: f64 = 0.1;
    for ((v, gi), cap) in theta_raw.data.iter_mut().zip(&g).zip(raw_caps) {
        let slope = crate::tensor::sigmoid(*v).max(1e-6);
        let step = (lr * gi / slope).clamp(-MAX_STEP, MAX_STEP);
        *v = (*v - step).clamp(-30.0, *cap);
    }
    theta_raw.grad = None;
    Ok(())
}

/// Adam state for a single parameter tensor.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, p: &mut Tensor, lr_scale: f64) -> Result<()> {
        let g = p.grad.as_ref().ok_or(Error::MissingGrad(0))?.clone();
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..p.data.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            p.data[i] -= self.lr * lr_scale * mhat / (vhat.sqrt() + self.eps);
        }
        p.grad = None;
        Ok(())
    }
}
