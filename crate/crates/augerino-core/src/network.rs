//! Small base networks built on the tape: a desk-scale CNN classifier, an
//! MLP, and a spatially-preserving segmentation CNN.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetworkKind {
    /// 4 conv layers (two of them stride-2, acting as pooling) + 2 dense.
    CnnSmall,
    Mlp,
    /// Padding-1 stride-1 convs only; output keeps the input extents.
    CnnSeg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    LogProb,
    Linear,
}

#[derive(Clone, Debug)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    /// (channels, height, width) for conv kinds; (1, 1, in_dim) for the MLP.
    pub in_shape: (usize, usize, usize),
    pub widths: Vec<usize>,
    pub out_dim: usize,
    pub head: Head,
}

impl NetworkSpec {
    pub fn cnn_small(in_shape: (usize, usize, usize), c1: usize, c2: usize, hidden: usize, out_dim: usize, head: Head) -> Self {
        NetworkSpec {
            kind: NetworkKind::CnnSmall,
            in_shape,
            widths: vec![c1, c2, hidden],
            out_dim,
            head,
        }
    }

    pub fn mlp(in_dim: usize, widths: Vec<usize>, out_dim: usize, head: Head) -> Self {
        NetworkSpec {
            kind: NetworkKind::Mlp,
            in_shape: (1, 1, in_dim),
            widths,
            out_dim,
            head,
        }
    }

    pub fn cnn_seg(in_shape: (usize, usize, usize), c1: usize, out_classes: usize) -> Self {
        NetworkSpec {
            kind: NetworkKind::CnnSeg,
            in_shape,
            widths: vec![c1],
            out_dim: out_classes,
            head: Head::LogProb,
        }
    }
}

/// Base network f_w: the spec plus flat parameter tensors.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<Tensor>,
}

fn fan_in_uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    // He-style gain for the relu stacks: std sqrt(2/fan_in)
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).unwrap().param()
}

impl Network {
    /// Builds a network with fan-in-scaled uniform initial weights.
    pub fn build<R: Rng>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        if spec.out_dim == 0 || spec.widths.iter().any(|&w| w == 0) {
            return Err(Error::Dimension("network spec has a zero width".into()));
        }
        if spec.head == Head::LogProb && spec.out_dim < 2 {
            return Err(Error::Dimension(
                "log-probability head needs at least 2 classes".into(),
            ));
        }
        let mut params = Vec::new();
        match spec.kind {
            NetworkKind::Mlp => {
                let mut prev = spec.in_shape.2;
                for &w in &spec.widths {
                    params.push(fan_in_uniform(rng, vec![prev, w], prev));
                    params.push(Tensor::zeros(vec![1, w]).param());
                    prev = w;
                }
                params.push(fan_in_uniform(rng, vec![prev, spec.out_dim], prev));
                params.push(Tensor::zeros(vec![1, spec.out_dim]).param());
            }
            NetworkKind::CnnSmall => {
                let (cin, h, w) = spec.in_shape;
                let (c1, c2, hidden) = (spec.widths[0], spec.widths[1], spec.widths[2]);
                if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
                    return Err(Error::Dimension(format!(
                        "cnn-small needs extents divisible by 4 and >= 8, got {h}x{w}"
                    )));
                }
                for (ci, co) in [(cin, c1), (c1, c1), (c1, c2), (c2, c2)] {
                    params.push(fan_in_uniform(rng, vec![co, ci, 3, 3], ci * 9));
                }
                let flat = c2 * (h / 4) * (w / 4);
                params.push(fan_in_uniform(rng, vec![flat, hidden], flat));
                params.push(Tensor::zeros(vec![1, hidden]).param());
                params.push(fan_in_uniform(rng, vec![hidden, spec.out_dim], hidden));
                params.push(Tensor::zeros(vec![1, spec.out_dim]).param());
            }
            NetworkKind::CnnSeg => {
                let (cin, _, _) = spec.in_shape;
                let c1 = spec.widths[0];
                for (ci, co) in [(cin, c1), (c1, c1), (c1, spec.out_dim)] {
                    params.push(fan_in_uniform(rng, vec![co, ci, 3, 3], ci * 9));
                }
            }
        }
        Ok(Network { spec, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Forward pass on the tape. `param_vars` must come from registering
    /// `self.params` on the same tape, in order.
    pub fn forward(&self, tape: &mut Tape, param_vars: &[Var], x: Var) -> Result<Var> {
        let xs = tape.value(x).shape.clone();
        match self.spec.kind {
            NetworkKind::Mlp => {
                let in_dim = self.spec.in_shape.2;
                if tape.value(x).numel() != in_dim {
                    return Err(Error::ShapeMismatch {
                        op: "mlp forward",
                        left: xs,
                        right: vec![in_dim],
                    });
                }
                let mut h = tape.reshape(x, vec![1, in_dim])?;
                let n_hidden = self.spec.widths.len();
                for l in 0..n_hidden {
                    let z = tape.matmul(h, param_vars[2 * l])?;
                    let z = tape.add(z, param_vars[2 * l + 1])?;
                    h = tape.relu(z)?;
                }
                let z = tape.matmul(h, param_vars[2 * n_hidden])?;
                let out = tape.add(z, param_vars[2 * n_hidden + 1])?;
                self.apply_head(tape, out)
            }
            NetworkKind::CnnSmall => {
                let (cin, hh, ww) = self.spec.in_shape;
                if xs != [cin, hh, ww] {
                    return Err(Error::ShapeMismatch {
                        op: "cnn-small forward",
                        left: xs,
                        right: vec![cin, hh, ww],
                    });
                }
                let mut h = x;
                for (l, &stride) in [1usize, 2, 1, 2].iter().enumerate() {
                    let z = tape.conv2d(h, param_vars[l], stride, 1)?;
                    h = tape.relu(z)?;
                }
                let flat = tape.value(h).numel();
                let hflat = tape.reshape(h, vec![1, flat])?;
                let z = tape.matmul(hflat, param_vars[4])?;
                let z = tape.add(z, param_vars[5])?;
                let z = tape.relu(z)?;
                let z = tape.matmul(z, param_vars[6])?;
                let out = tape.add(z, param_vars[7])?;
                self.apply_head(tape, out)
            }
            NetworkKind::CnnSeg => {
                let mut h = x;
                let z = tape.conv2d(h, param_vars[0], 1, 1)?;
                h = tape.relu(z)?;
                let z = tape.conv2d(h, param_vars[1], 1, 1)?;
                h = tape.relu(z)?;
                // logits per pixel, extents preserved
                tape.conv2d(h, param_vars[2], 1, 1)
            }
        }
    }

    fn apply_head(&self, tape: &mut Tape, out: Var) -> Result<Var> {
        match self.spec.head {
            Head::LogProb => tape.log_softmax(out),
            Head::Linear => Ok(out),
        }
    }

    /// Registers all parameters as tape leaves.
    pub fn register(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.leaf(p)).collect()
    }
}
