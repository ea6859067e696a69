//! Experiment configuration, the training/evaluation loop, and the
//! diagnostic scans. All commands are deterministic given config + seed and
//! serialize numbers with 17 significant digits.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{self, DataError, Dataset, Generator, Targets};
use crate::error::Error as TensorError;
use crate::lie::{expm, regularizer_neg_l2, sample_eps, GeneratorBasis};
use crate::model::{AugerinoModel, Mode, Target};
use crate::network::{Head, Network, NetworkSpec};
use crate::tensor::{
    cosine_lr, flat_then_cosine_lr, sgd_update, softplus, softplus_inverse, width_sgd_update,
    Tape, Tensor, Var,
};
use crate::warp::{rotation_matrix, warp_image, warp_tensor};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {value}")]
    InvalidValue { key: String, value: String },
    #[error("malformed config line: {0}")]
    Malformed(String),
    #[error("missing required key `{0}`")]
    Missing(String),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("numeric failure at training step {step}: {detail}")]
    Numeric { step: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything a training run needs; flat key=value text format.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub dataset: Generator,
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    pub c1: usize,
    pub c2: usize,
    pub hidden: usize,
    pub lambda: f64,
    pub lr0: f64,
    /// Learning rate for the augmentation widths (width-space SGD).
    pub lr_aug: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_copies_train: usize,
    pub n_copies_test: usize,
    /// Initial width (post-softplus) for every generator.
    pub theta_init: f64,
    /// Overrides the initial rotation width only; used by the trajectory
    /// sweep, which varies where the rotation axis starts while the other
    /// axes keep their standard small init. Not a config-file key.
    pub rotation_init: Option<f64>,
    pub seed: u64,
    pub mc_budget: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: Generator::SoftRotation,
            n_train: 400,
            n_test: 200,
            size: 16,
            c1: 6,
            c2: 12,
            hidden: 32,
            lambda: 0.05,
            lr0: 0.05,
            lr_aug: 0.7,
            epochs: 60,
            batch_size: 50,
            n_copies_train: 1,
            n_copies_test: 4,
            theta_init: 0.1,
            rotation_init: None,
            seed: 0,
            mc_budget: 256,
        }
    }
}

impl ExperimentConfig {
    /// Applies one key=value pair; unknown keys are hard errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::InvalidValue {
                key: key.to_string(),
                value: value.to_string(),
            })
        }
        match key {
            "dataset" => {
                self.dataset = Generator::from_name(value).ok_or_else(|| {
                    ConfigError::InvalidValue {
                        key: key.into(),
                        value: value.into(),
                    }
                })?
            }
            "n_train" => self.n_train = p(key, value)?,
            "n_test" => self.n_test = p(key, value)?,
            "size" => self.size = p(key, value)?,
            "c1" => self.c1 = p(key, value)?,
            "c2" => self.c2 = p(key, value)?,
            "hidden" => self.hidden = p(key, value)?,
            "lambda" => self.lambda = p(key, value)?,
            "lr0" => self.lr0 = p(key, value)?,
            "lr_aug" => self.lr_aug = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "n_copies_train" => self.n_copies_train = p(key, value)?,
            "n_copies_test" => self.n_copies_test = p(key, value)?,
            "theta_init" => self.theta_init = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "mc_budget" => self.mc_budget = p(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed(line.to_string()))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::parse(&text)?)
    }

    pub fn mode(&self) -> Mode {
        match self.dataset {
            Generator::FullRotation | Generator::SoftRotation => Mode::InvariantClassify,
            Generator::RotationRegression => Mode::Regress,
            Generator::ToySegmentation => Mode::Equivariant,
        }
    }

    fn out_classes(&self) -> usize {
        match self.dataset {
            Generator::FullRotation => 3,
            Generator::SoftRotation => 4,
            Generator::RotationRegression => 1,
            Generator::ToySegmentation => 3,
        }
    }

    pub fn build_model(&self) -> Result<AugerinoModel, ExperimentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.seed, 1));
        let in_shape = (1, self.size, self.size);
        let spec = match self.mode() {
            Mode::InvariantClassify => NetworkSpec::cnn_small(
                in_shape,
                self.c1,
                self.c2,
                self.hidden,
                self.out_classes(),
                Head::LogProb,
            ),
            Mode::Regress => NetworkSpec::cnn_small(
                in_shape,
                self.c1,
                self.c2,
                self.hidden,
                1,
                Head::Linear,
            ),
            Mode::Equivariant => NetworkSpec::cnn_seg(in_shape, self.c1, self.out_classes()),
        };
        let network = Network::build(spec, &mut rng)?;
        let mut model = AugerinoModel::new(
            network,
            GeneratorBasis::affine2d(),
            self.theta_init,
            self.mode(),
            self.lambda,
        );
        model.n_copies_train = self.n_copies_train;
        model.n_copies_test = self.n_copies_test;
        if let Some(r) = self.rotation_init {
            model.theta_raw.data[2] = width_to_raw(r);
        }
        Ok(model)
    }

    pub fn train_dataset(&self) -> Dataset {
        data::generate(self.dataset, self.n_train, self.size, sub_seed(self.seed, 2))
    }

    pub fn test_dataset(&self) -> Dataset {
        data::generate(self.dataset, self.n_test, self.size, sub_seed(self.seed, 3))
    }
}

pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream)
        .rotate_left(17)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Width learning rate: widths hold still over the first fifth of training
/// while the network fits (the data term cannot restrain anything before
/// then), ramp up linearly over the second fifth so a still-converging
/// network cannot slam the widths shut, run at full rate while the
/// equilibrium forms, and cool down over the last fifth so the final value
/// is not one noisy step.
pub fn width_lr(lr0: f64, epoch: usize, total: usize) -> f64 {
    let warm = (total / 5).max(1);
    let cool = total - warm;
    if epoch < warm {
        0.0
    } else if epoch < 2 * warm {
        lr0 * (epoch - warm + 1) as f64 / warm as f64
    } else if epoch >= cool {
        cosine_lr(lr0, epoch - cool, total - cool)
    } else {
        lr0
    }
}

/// Serializes with 17 significant digits; identical across reruns.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Clone, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub metric: f64,
    pub widths: Vec<f64>,
}

pub struct TrainOutput {
    pub model: AugerinoModel,
    pub history: Vec<EpochRow>,
    /// Post-softplus widths after every optimizer step.
    pub step_widths: Vec<Vec<f64>>,
}

impl TrainOutput {
    pub fn epoch_csv(&self) -> String {
        let k = self.model.basis.len();
        let mut s = String::from("schema,epoch,loss,metric");
        for i in 1..=k {
            s.push_str(&format!(",theta_{i}"));
        }
        s.push('\n');
        for row in &self.history {
            s.push_str(&format!(
                "train-v1,{},{},{}",
                row.epoch,
                fmt17(row.loss),
                fmt17(row.metric)
            ));
            for w in &row.widths {
                s.push(',');
                s.push_str(&fmt17(*w));
            }
            s.push('\n');
        }
        s
    }
}

/// Runs the training loop: single-sample augmented loss, joint update of
/// network weights (SGD, flat-then-cosine schedule) and widths
/// (preconditioned width-space SGD).
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutput, ExperimentError> {
    let train_ds = cfg.train_dataset();
    train_on(cfg, &train_ds)
}

pub fn train_on(cfg: &ExperimentConfig, train_ds: &Dataset) -> Result<TrainOutput, ExperimentError> {
    let mut model = cfg.build_model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 4));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_widths = Vec::new();
    let n = train_ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        // Fisher-Yates shuffle from the run RNG
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        let mut total = 0usize;
        let mut sq_err = 0.0;
        let mut px_correct = 0usize;
        let mut px_total = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<&Tensor> = chunk.iter().map(|&i| &train_ds.inputs[i]).collect();
            let targets: Vec<Target> = chunk.iter().map(|&i| train_ds.targets.get(i)).collect();
            let mut tape = Tape::new();
            let reg = model.register(&mut tape)?;
            let (loss, stats) = model
                .train_loss(&mut tape, &reg, &inputs, &targets, &mut rng)
                .map_err(|e| ExperimentError::Numeric {
                    step,
                    detail: e.to_string(),
                })?;
            let loss_val = tape.value(loss).scalar_value();
            if !loss_val.is_finite() {
                return Err(ExperimentError::Numeric {
                    step,
                    detail: format!("loss = {loss_val}"),
                });
            }
            tape.backward(loss)?;
            model.pull_grads(&tape, &reg);
            {
                let mut refs: Vec<&mut Tensor> = model.network.params.iter_mut().collect();
                sgd_update(&mut refs, flat_then_cosine_lr(cfg.lr0, epoch, cfg.epochs))?;
            }
            let caps = model.basis.raw_width_caps();
            width_sgd_update(
                &mut model.theta_raw,
                width_lr(cfg.lr_aug, epoch, cfg.epochs),
                &caps,
            )?;
            if let Some(c) = model.color_theta_raw.as_mut() {
                if c.grad.is_some() {
                    let mut refs: Vec<&mut Tensor> = vec![c];
                    sgd_update(&mut refs, width_lr(cfg.lr_aug, epoch, cfg.epochs))?;
                }
            }
            step_widths.push(model.widths());
            epoch_loss += loss_val;
            correct += stats.correct;
            total += stats.total;
            sq_err += stats.sq_err_sum;
            px_correct += stats.pixel_correct;
            px_total += stats.pixel_total;
            batches += 1;
            step += 1;
        }
        let metric = match model.mode {
            Mode::InvariantClassify => correct as f64 / total.max(1) as f64,
            Mode::Regress => sq_err / total.max(1) as f64,
            Mode::Equivariant => px_correct as f64 / px_total.max(1) as f64,
        };
        history.push(EpochRow {
            epoch,
            loss: epoch_loss / batches.max(1) as f64,
            metric,
            widths: model.widths(),
        });
    }
    Ok(TrainOutput {
        model,
        history,
        step_widths,
    })
}

pub struct EvalOutput {
    /// Accuracy for classification; mse for regression; pixel accuracy for
    /// segmentation.
    pub metric: f64,
    /// (input rotation angle, metric) over a fixed angle grid.
    pub curve: Vec<(f64, f64)>,
}

impl EvalOutput {
    pub fn csv(&self) -> String {
        let mut s = String::from("schema,angle,metric\n");
        s.push_str(&format!("eval-v1,overall,{}\n", fmt17(self.metric)));
        for (a, m) in &self.curve {
            s.push_str(&format!("eval-v1,{},{}\n", fmt17(*a), fmt17(*m)));
        }
        s
    }
}

pub const SENSITIVITY_ANGLES: usize = 25;

/// Metric of one model on one dataset at the given copy count, plus the
/// rotation-sensitivity curve over a fixed angle grid.
pub fn evaluate(
    model: &AugerinoModel,
    ds: &Dataset,
    n_copies: usize,
    seed: u64,
) -> Result<EvalOutput, ExperimentError> {
    let mut eval_model = model.clone();
    eval_model.n_copies_test = n_copies;
    let metric = dataset_metric(&eval_model, ds, None, seed)?;
    let mut curve = Vec::with_capacity(SENSITIVITY_ANGLES);
    for a in 0..SENSITIVITY_ANGLES {
        let angle = -PI + 2.0 * PI * a as f64 / (SENSITIVITY_ANGLES - 1) as f64;
        let m = dataset_metric(&eval_model, ds, Some(angle), sub_seed(seed, 100 + a as u64))?;
        curve.push((angle, m));
    }
    Ok(EvalOutput { metric, curve })
}

/// Metric over one dataset; optionally rotates every input first.
pub fn dataset_metric(
    model: &AugerinoModel,
    ds: &Dataset,
    rotate_by: Option<f64>,
    seed: u64,
) -> Result<f64, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = rotate_by.map(rotation_matrix);
    match (&model.mode, &ds.targets) {
        (Mode::InvariantClassify, Targets::Labels(labels)) => {
            let mut correct = 0usize;
            for (x, &l) in ds.inputs.iter().zip(labels) {
                let xin = match &rot {
                    Some(r) => warp_tensor(x, r)?,
                    None => x.clone(),
                };
                if model.predict_label(&xin, &mut rng)? == l {
                    correct += 1;
                }
            }
            Ok(correct as f64 / ds.len() as f64)
        }
        (Mode::Regress, Targets::Values(values)) => {
            let mut sq = 0.0;
            for (x, &y) in ds.inputs.iter().zip(values) {
                let xin = match &rot {
                    Some(r) => warp_tensor(x, r)?,
                    None => x.clone(),
                };
                let out = model.predict(&xin, &mut rng)?;
                let d = out.data[0] - y;
                sq += d * d;
            }
            Ok(sq / ds.len() as f64)
        }
        (Mode::Equivariant, Targets::Masks(masks)) => {
            let k = model.basis.len();
            let mut correct = 0usize;
            let mut total = 0usize;
            for (x, mask) in ds.inputs.iter().zip(masks) {
                // rotation of the input rotates the target mask with it
                let (xin, min) = match &rot {
                    Some(r) => (
                        warp_tensor(x, r)?,
                        crate::warp::warp_mask_nearest(mask, ds.meta.size, ds.meta.size, r),
                    ),
                    None => (x.clone(), mask.clone()),
                };
                let eps_list: Vec<Vec<f64>> = (0..model.n_copies_test.max(1))
                    .map(|_| sample_eps(&mut rng, k))
                    .collect();
                let out = model.predict_equivariant(&xin, &eps_list)?;
                let c = out.shape[0];
                let hw = out.shape[1] * out.shape[2];
                for (p, &l) in min.iter().enumerate() {
                    if l < 0 {
                        continue;
                    }
                    let mut best = 0usize;
                    for ch in 1..c {
                        if out.data[ch * hw + p] > out.data[best * hw + p] {
                            best = ch;
                        }
                    }
                    if best == l as usize {
                        correct += 1;
                    }
                    total += 1;
                }
            }
            Ok(correct as f64 / total.max(1) as f64)
        }
        _ => Err(ExperimentError::Numeric {
            step: 0,
            detail: "model mode does not match dataset targets".into(),
        }),
    }
}

#[derive(Clone, Debug)]
pub struct ScanRow {
    pub width: f64,
    pub loss: f64,
    pub grad: f64,
}

pub fn scan_csv(rows: &[ScanRow]) -> String {
    let mut s = String::from("schema,width,loss,grad\n");
    for r in rows {
        s.push_str(&format!(
            "scan-v1,{},{},{}\n",
            fmt17(r.width),
            fmt17(r.loss),
            fmt17(r.grad)
        ));
    }
    s
}

/// Expected (optionally regularized) loss as a function of one generator's
/// width, Monte Carlo with common random numbers across the grid. The
/// scanned width is a direct leaf so the reported gradient is d loss / d
/// width even at width 0.
pub fn scan_range(
    model: &AugerinoModel,
    ds: &Dataset,
    axis: usize,
    grid: &[f64],
    lambda: f64,
    budget: usize,
    seed: u64,
) -> Result<Vec<ScanRow>, ExperimentError> {
    if grid.is_empty() {
        return Err(ExperimentError::Numeric {
            step: 0,
            detail: "scan grid is empty".into(),
        });
    }
    let k = model.basis.len();
    // common random numbers: one (example, eps) pool shared by all widths
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<(usize, Vec<f64>)> = (0..budget)
        .map(|_| (rng.gen_range(0..ds.len()), sample_eps(&mut rng, k)))
        .collect();
    let fixed_widths = model.widths();
    let mut net = model.network.clone();
    net.params.iter_mut().for_each(|p| p.requires_grad = false);
    let mut rows = Vec::with_capacity(grid.len());
    for &width in grid {
        let mut tape = Tape::new();
        let width_leaf = tape.leaf(&Tensor::scalar(width).param())?;
        let net_vars = net.register(&mut tape)?;
        let mut acc: Option<Var> = None;
        for (idx, eps) in &samples {
            let x = tape.constant(ds.inputs[*idx].clone())?;
            // algebra element with the scanned axis taken from the leaf
            let dim = model.basis.dim;
            let mut alg = tape.constant(Tensor::zeros(vec![dim, dim]))?;
            for (i, gmat) in model.basis.matrices.iter().enumerate() {
                let gvar = tape.constant(gmat.clone())?;
                let term = if i == axis {
                    let scaled = tape.mul_scalar(gvar, width_leaf)?;
                    tape.scale_const(scaled, eps[i])?
                } else {
                    tape.scale_const(gvar, eps[i] * fixed_widths[i])?
                };
                alg = tape.add(alg, term)?;
            }
            let g = expm(&mut tape, alg)?;
            let xw = warp_image(&mut tape, x, g)?;
            let out = net.forward(&mut tape, &net_vars, xw)?;
            let l = match (&model.mode, ds.targets.get(*idx)) {
                (Mode::InvariantClassify, Target::Label(lab)) => tape.nll(out, &[lab])?,
                (Mode::Regress, Target::Value(y)) => {
                    let yt = tape.constant(Tensor::new(vec![1, 1], vec![y])?)?;
                    tape.mse(out, yt)?
                }
                _ => {
                    return Err(ExperimentError::Numeric {
                        step: 0,
                        detail: "scan-range supports classification and regression".into(),
                    })
                }
            };
            acc = Some(match acc {
                None => l,
                Some(a) => tape.add(a, l)?,
            });
        }
        let mut loss = tape.scale_const(acc.unwrap(), 1.0 / budget as f64)?;
        if lambda != 0.0 {
            // -lambda * (width^2 + sum of fixed widths^2 off-axis)
            let w2 = tape.square(width_leaf)?;
            let off: f64 = fixed_widths
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != axis)
                .map(|(_, w)| w * w)
                .sum();
            let reg = tape.add_const(w2, off)?;
            let reg = tape.scale_const(reg, -lambda)?;
            loss = tape.add(loss, reg)?;
        }
        let loss_val = tape.value(loss).scalar_value();
        tape.backward(loss)?;
        let grad = tape.grad(width_leaf).expect("backward ran")[0];
        rows.push(ScanRow {
            width,
            loss: loss_val,
            grad,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct TrajectoryPoint {
    pub init: f64,
    pub step: usize,
    pub rotation_width: f64,
}

pub fn trajectories_csv(points: &[TrajectoryPoint]) -> String {
    let mut s = String::from("schema,init,step,theta_3\n");
    for p in points {
        s.push_str(&format!(
            "traj-v1,{},{},{}\n",
            fmt17(p.init),
            p.step,
            fmt17(p.rotation_width)
        ));
    }
    s
}

/// Trains one model per initial width with a shared data seed; logs the
/// rotation width after every step.
pub fn trajectories(
    cfg: &ExperimentConfig,
    inits: &[f64],
) -> Result<(Vec<TrajectoryPoint>, Vec<f64>), ExperimentError> {
    if inits.len() < 2 {
        return Err(ExperimentError::Config(ConfigError::InvalidValue {
            key: "inits".into(),
            value: "need at least 2 initial widths".into(),
        }));
    }
    let train_ds = cfg.train_dataset();
    let mut points = Vec::new();
    let mut finals = Vec::new();
    for &init in inits {
        let mut c = cfg.clone();
        c.rotation_init = Some(init);
        let out = train_on(&c, &train_ds)?;
        for (step, widths) in out.step_widths.iter().enumerate() {
            points.push(TrajectoryPoint {
                init,
                step,
                rotation_width: widths[2],
            });
        }
        finals.push(out.model.widths()[2]);
    }
    Ok((points, finals))
}

#[derive(Clone, Debug)]
pub struct RayRow {
    pub ray: usize,
    pub radius: f64,
    pub train_loss: f64,
    pub test_error: f64,
}

pub fn rays_csv(rows: &[RayRow]) -> String {
    let mut s = String::from("schema,ray,radius,train_loss,test_error\n");
    for r in rows {
        s.push_str(&format!(
            "rays-v1,{},{},{},{}\n",
            r.ray,
            fmt17(r.radius),
            fmt17(r.train_loss),
            fmt17(r.test_error)
        ));
    }
    s
}

/// Train loss and test error along random unit-norm rays in weight space.
/// The same augmentation samples are reused at every radius of a ray.
pub fn scan_rays(
    model: &AugerinoModel,
    train_ds: &Dataset,
    test_ds: &Dataset,
    n_rays: usize,
    radii: &[f64],
    seed: u64,
) -> Result<Vec<RayRow>, ExperimentError> {
    let dims: Vec<usize> = model.network.params.iter().map(|p| p.numel()).collect();
    let total: usize = dims.iter().sum();
    let mut rows = Vec::new();
    for ray in 0..n_rays {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1000 + ray as u64));
        let mut dir: Vec<f64> = (0..total).map(|_| crate::lie::standard_normal(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        for &radius in radii {
            let mut perturbed = model.clone();
            let mut off = 0;
            for p in perturbed.network.params.iter_mut() {
                for v in p.data.iter_mut() {
                    *v += radius * dir[off];
                    off += 1;
                }
            }
            let train_loss = augmented_data_loss(&perturbed, train_ds, sub_seed(seed, 7))?;
            let acc = dataset_metric(&perturbed, test_ds, None, sub_seed(seed, 8))?;
            let test_error = match perturbed.mode {
                Mode::Regress => acc,
                _ => 1.0 - acc,
            };
            rows.push(RayRow {
                ray,
                radius,
                train_loss,
                test_error,
            });
        }
    }
    Ok(rows)
}

/// Mean single-copy data loss (no regularizer) over a dataset with fixed
/// augmentation samples.
pub fn augmented_data_loss(
    model: &AugerinoModel,
    ds: &Dataset,
    seed: u64,
) -> Result<f64, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frozen = model.clone();
    frozen.network.params.iter_mut().for_each(|p| p.requires_grad = false);
    frozen.theta_raw.requires_grad = false;
    frozen.lambda = 0.0;
    frozen.n_copies_train = 1;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk_start in (0..ds.len()).step_by(64) {
        let end = (chunk_start + 64).min(ds.len());
        let inputs: Vec<&Tensor> = (chunk_start..end).map(|i| &ds.inputs[i]).collect();
        let targets: Vec<Target> = (chunk_start..end).map(|i| ds.targets.get(i)).collect();
        let mut tape = Tape::new();
        let reg = frozen.register(&mut tape)?;
        let (loss, _) = frozen.train_loss(&mut tape, &reg, &inputs, &targets, &mut rng)?;
        total += tape.value(loss).scalar_value() * inputs.len() as f64;
        count += inputs.len();
    }
    Ok(total / count as f64)
}

/// Default width grid used by the scan-range command.
pub fn default_scan_grid() -> Vec<f64> {
    (0..=16).map(|i| i as f64 * PI / 16.0).collect()
}

/// Raw widths from an initial post-softplus width, clamped away from -inf.
pub fn width_to_raw(width: f64) -> f64 {
    if width <= 1e-12 {
        -60.0
    } else {
        softplus_inverse(width)
    }
}

/// Convenience: post-softplus widths of a raw vector.
pub fn widths_of(theta_raw: &Tensor) -> Vec<f64> {
    theta_raw.data.iter().map(|&r| softplus(r)).collect()
}

/// Regularizer value for reporting: -lambda * |softplus(theta_raw)|^2.
pub fn reg_value(theta_raw: &Tensor, lambda: f64) -> Result<f64, ExperimentError> {
    let mut tape = Tape::new();
    let v = tape.leaf(theta_raw)?;
    let r = regularizer_neg_l2(&mut tape, v)?;
    Ok(lambda * tape.value(r).scalar_value())
}
