//! The augmentation-averaged model: Monte Carlo training loss with the
//! reparameterization trick, the negative-L2 width regularizer, multi-copy
//! test-time averaging, and the equivariant variant.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lie::{inverse_of_sample, regularizer_neg_l2, sample_affine, sample_eps, GeneratorBasis};
use crate::network::Network;
use crate::tensor::{softplus, Tape, Tensor, Var};
use crate::warp::{warp_image, warp_mask_nearest};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    InvariantClassify,
    Regress,
    Equivariant,
}

/// Per-example targets across the three task modes.
#[derive(Clone, Debug)]
pub enum Target {
    Label(usize),
    Value(f64),
    /// Per-pixel class labels, -1 for ignored pixels.
    Mask(Vec<i64>),
}

#[derive(Clone, Debug)]
pub struct AugerinoModel {
    pub network: Network,
    pub theta_raw: Tensor,
    pub basis: GeneratorBasis,
    /// Optional learned widths for brightness and contrast sampling.
    pub color_theta_raw: Option<Tensor>,
    pub mode: Mode,
    pub n_copies_train: usize,
    pub n_copies_test: usize,
    pub lambda: f64,
}

/// Tape handles for one registration of the model parameters.
pub struct RegisteredModel {
    pub net_vars: Vec<Var>,
    pub theta_var: Var,
    pub color_var: Option<Var>,
}

/// Forward metrics accumulated while building the training loss.
pub struct BatchStats {
    pub correct: usize,
    pub total: usize,
    pub sq_err_sum: f64,
    pub pixel_correct: usize,
    pub pixel_total: usize,
}

impl AugerinoModel {
    pub fn new(
        network: Network,
        basis: GeneratorBasis,
        init_width: f64,
        mode: Mode,
        lambda: f64,
    ) -> Self {
        let k = basis.len();
        AugerinoModel {
            network,
            theta_raw: crate::lie::AugParams::with_width(k, init_width).theta_raw,
            basis,
            color_theta_raw: None,
            mode,
            n_copies_train: 1,
            n_copies_test: 4,
            lambda,
        }
    }

    pub fn widths(&self) -> Vec<f64> {
        self.theta_raw.data.iter().map(|&r| softplus(r)).collect()
    }

    pub fn register(&self, tape: &mut Tape) -> Result<RegisteredModel> {
        let net_vars = self.network.register(tape)?;
        let theta_var = tape.leaf(&self.theta_raw)?;
        let color_var = match &self.color_theta_raw {
            Some(c) => Some(tape.leaf(c)?),
            None => None,
        };
        Ok(RegisteredModel {
            net_vars,
            theta_var,
            color_var,
        })
    }

    /// Copies the tape gradients back onto the owned parameter tensors.
    pub fn pull_grads(&mut self, tape: &Tape, reg: &RegisteredModel) {
        for (p, v) in self.network.params.iter_mut().zip(&reg.net_vars) {
            p.grad = tape.grad(*v).map(|g| g.to_vec());
        }
        self.theta_raw.grad = tape.grad(reg.theta_var).map(|g| g.to_vec());
        if let (Some(c), Some(cv)) = (self.color_theta_raw.as_mut(), reg.color_var) {
            c.grad = tape.grad(cv).map(|g| g.to_vec());
        }
    }

    /// One augmented forward pass of a single input: sample a transform,
    /// warp, optionally color-jitter, run the network.
    fn forward_one_copy<R: Rng>(
        &self,
        tape: &mut Tape,
        reg: &RegisteredModel,
        x: Var,
        rng: &mut R,
    ) -> Result<(Var, Vec<f64>)> {
        let eps = sample_eps(rng, self.basis.len());
        let g = sample_affine(tape, reg.theta_var, &self.basis, &eps)?;
        let mut xw = warp_image(tape, x, g)?;
        if let Some(cv) = reg.color_var {
            let widths = tape.softplus(cv)?;
            let eb = rng.gen_range(-1.0..1.0);
            let ec = rng.gen_range(-1.0..1.0);
            let wb = tape.index_scalar(widths, 0)?;
            let tb = tape.scale_const(wb, eb)?;
            xw = tape.brightness(xw, tb)?;
            let wc = tape.index_scalar(widths, 1)?;
            let tc = tape.scale_const(wc, ec)?;
            xw = tape.contrast(xw, tc)?;
        }
        let out = self.network.forward(tape, &reg.net_vars, xw)?;
        Ok((out, eps))
    }

    /// Regularized training loss over a batch (Monte Carlo, n_copies_train
    /// samples per input). Classification averages log-probabilities across
    /// copies; regression and segmentation average per-copy losses.
    pub fn train_loss<R: Rng>(
        &self,
        tape: &mut Tape,
        reg: &RegisteredModel,
        inputs: &[&Tensor],
        targets: &[Target],
        rng: &mut R,
    ) -> Result<(Var, BatchStats)> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::Dimension(format!(
                "batch of {} inputs vs {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let n_copies = self.n_copies_train.max(1);
        let mut stats = BatchStats {
            correct: 0,
            total: 0,
            sq_err_sum: 0.0,
            pixel_correct: 0,
            pixel_total: 0,
        };
        let mut per_example: Vec<Var> = Vec::with_capacity(inputs.len());
        for (x, target) in inputs.iter().zip(targets) {
            let xv = tape.constant((*x).clone())?;
            match (self.mode, target) {
                (Mode::InvariantClassify, Target::Label(label)) => {
                    let mut avg: Option<Var> = None;
                    for _ in 0..n_copies {
                        let (out, _) = self.forward_one_copy(tape, reg, xv, rng)?;
                        avg = Some(match avg {
                            None => out,
                            Some(a) => tape.add(a, out)?,
                        });
                    }
                    let avg = tape.scale_const(avg.unwrap(), 1.0 / n_copies as f64)?;
                    let loss = tape.nll(avg, &[*label])?;
                    per_example.push(loss);
                    let row = tape.value(avg);
                    let pred = argmax(&row.data);
                    if pred == *label {
                        stats.correct += 1;
                    }
                    stats.total += 1;
                }
                (Mode::Regress, Target::Value(y)) => {
                    let yt = tape.constant(Tensor::new(vec![1, 1], vec![*y])?)?;
                    let mut acc: Option<Var> = None;
                    let mut pred_sum = 0.0;
                    for _ in 0..n_copies {
                        let (out, _) = self.forward_one_copy(tape, reg, xv, rng)?;
                        pred_sum += tape.value(out).data[0];
                        let l = tape.mse(out, yt)?;
                        acc = Some(match acc {
                            None => l,
                            Some(a) => tape.add(a, l)?,
                        });
                    }
                    let loss = tape.scale_const(acc.unwrap(), 1.0 / n_copies as f64)?;
                    per_example.push(loss);
                    let d = pred_sum / n_copies as f64 - *y;
                    stats.sq_err_sum += d * d;
                    stats.total += 1;
                }
                (Mode::Equivariant, Target::Mask(mask)) => {
                    let shape = tape.value(xv).shape.clone();
                    let (h, w) = (shape[1], shape[2]);
                    let mut acc: Option<Var> = None;
                    for _ in 0..n_copies {
                        let eps = sample_eps(rng, self.basis.len());
                        let g = sample_affine(tape, reg.theta_var, &self.basis, &eps)?;
                        let xw = warp_image(tape, xv, g)?;
                        let gmat = tape.value(g).clone();
                        let mask_w = warp_mask_nearest(mask, h, w, &gmat);
                        let out = self.network.forward(tape, &reg.net_vars, xw)?;
                        let rows = tape.channels_to_rows(out)?;
                        let logp = tape.log_softmax(rows)?;
                        // train-time pixel accuracy over labeled pixels
                        let lv = tape.value(logp);
                        let c = lv.shape[1];
                        for (p, &l) in mask_w.iter().enumerate() {
                            if l >= 0 {
                                if argmax(&lv.data[p * c..(p + 1) * c]) == l as usize {
                                    stats.pixel_correct += 1;
                                }
                                stats.pixel_total += 1;
                            }
                        }
                        let l = tape.masked_nll(logp, &mask_w)?;
                        acc = Some(match acc {
                            None => l,
                            Some(a) => tape.add(a, l)?,
                        });
                    }
                    let loss = tape.scale_const(acc.unwrap(), 1.0 / n_copies as f64)?;
                    per_example.push(loss);
                    stats.total += 1;
                }
                _ => {
                    return Err(Error::Dimension(
                        "target kind does not match the model mode".into(),
                    ))
                }
            }
        }
        let mut total = per_example[0];
        for &l in &per_example[1..] {
            total = tape.add(total, l)?;
        }
        let data_term = tape.scale_const(total, 1.0 / per_example.len() as f64)?;
        let mut r = regularizer_neg_l2(tape, reg.theta_var)?;
        if let Some(cv) = reg.color_var {
            let rc = regularizer_neg_l2(tape, cv)?;
            r = tape.add(r, rc)?;
        }
        let reg_term = tape.scale_const(r, self.lambda)?;
        let loss = tape.add(data_term, reg_term)?;
        Ok((loss, stats))
    }

    /// Monte Carlo averaged prediction over `n_copies_test` samples.
    /// Classification returns averaged log-probabilities; regression the
    /// averaged output.
    pub fn predict<R: Rng>(&self, x: &Tensor, rng: &mut R) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut frozen = self.clone();
        frozen.network.params.iter_mut().for_each(|p| p.requires_grad = false);
        frozen.theta_raw.requires_grad = false;
        if let Some(c) = frozen.color_theta_raw.as_mut() {
            c.requires_grad = false;
        }
        let reg = frozen.register(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let mut avg: Option<Var> = None;
        for _ in 0..self.n_copies_test.max(1) {
            let (out, _) = frozen.forward_one_copy(&mut tape, &reg, xv, rng)?;
            avg = Some(match avg {
                None => out,
                Some(a) => tape.add(a, out)?,
            });
        }
        let avg = tape.scale_const(avg.unwrap(), 1.0 / self.n_copies_test.max(1) as f64)?;
        Ok(tape.value(avg).clone())
    }

    pub fn predict_label<R: Rng>(&self, x: &Tensor, rng: &mut R) -> Result<usize> {
        let out = self.predict(x, rng)?;
        Ok(argmax(&out.data))
    }

    /// Equivariant prediction (Eq.-7 style): average of inversely warped
    /// outputs for warped inputs, over the provided eps samples. The inverse
    /// warp reuses the exact eps of the forward sample.
    pub fn predict_equivariant(&self, x: &Tensor, eps_list: &[Vec<f64>]) -> Result<Tensor> {
        let theta_raw = {
            let mut t = self.theta_raw.clone();
            t.requires_grad = false;
            t
        };
        let network = &self.network;
        let mut frozen_params: Vec<Tensor> = network.params.clone();
        frozen_params.iter_mut().for_each(|p| p.requires_grad = false);
        equivariant_average(x, &theta_raw, &self.basis, eps_list, |tape, xv| {
            let vars: Vec<Var> = frozen_params
                .iter()
                .map(|p| tape.leaf(p))
                .collect::<Result<_>>()?;
            network.forward(tape, &vars, xv)
        })
    }
}

/// Averages g^-1 f(g x) over the given eps samples with a caller-supplied
/// network closure. Each inverse reuses the eps of its forward transform.
pub fn equivariant_average<F>(
    x: &Tensor,
    theta_raw: &Tensor,
    basis: &GeneratorBasis,
    eps_list: &[Vec<f64>],
    mut f: F,
) -> Result<Tensor>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if eps_list.is_empty() {
        return Err(Error::Dimension("equivariant average needs >= 1 sample".into()));
    }
    let mut acc: Option<Tensor> = None;
    for eps in eps_list {
        let mut tape = Tape::new();
        let th = tape.leaf(theta_raw)?;
        let xv = tape.constant(x.clone())?;
        let g = sample_affine(&mut tape, th, basis, eps)?;
        let gx = warp_image(&mut tape, xv, g)?;
        let y = f(&mut tape, gx)?;
        if tape.value(y).shape[1..] != tape.value(xv).shape[1..] {
            return Err(Error::ShapeMismatch {
                op: "predict_equivariant",
                left: tape.value(y).shape.clone(),
                right: tape.value(xv).shape.clone(),
            });
        }
        let g_inv = inverse_of_sample(&mut tape, th, basis, eps)?;
        let back = warp_image(&mut tape, y, g_inv)?;
        let v = tape.value(back);
        acc = Some(match acc {
            None => v.clone(),
            Some(mut a) => {
                for (ai, bi) in a.data.iter_mut().zip(&v.data) {
                    *ai += bi;
                }
                a
            }
        });
    }
    let mut out = acc.unwrap();
    let n = eps_list.len() as f64;
    out.data.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
