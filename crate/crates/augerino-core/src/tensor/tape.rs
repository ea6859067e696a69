//! The gradient tape. Operations evaluate eagerly and record enough to
//! replay gradients in a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: usize, b: usize },
    Conv2d { x: usize, k: usize, stride: usize, pad: usize },
    Relu { x: usize },
    AddConst { x: usize },
    ScaleConst { x: usize, c: f64 },
    AddTensor { a: usize, b: usize },
    MulScalar { x: usize, s: usize },
    IndexScalar { x: usize, i: usize },
    Softplus { x: usize },
    Square { x: usize },
    Sum { x: usize },
    Reshape { x: usize },
    ChannelsToRows { x: usize },
    LogSoftmax { x: usize },
    Nll { logp: usize, labels: Vec<usize> },
    MaskedNll { logp: usize, labels: Vec<i64>, count: usize },
    Mse { pred: usize, target: usize },
    AffineGrid { g: usize, h: usize, w: usize },
    Bilinear { x: usize, grid: usize },
    Brightness { x: usize, t: usize },
    Contrast { x: usize, t: usize },
    RotTransAffine { t: usize, w: f64, h: f64 },
}

/// Reverse-mode tape. One tape per forward pass; `backward` may run once.
pub struct Tape {
    ops: Vec<Op>,
    requires: Vec<bool>,
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    done: bool,
    visits: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            requires: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            done: false,
            visits: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Number of recorded nodes visited by the last backward sweep.
    pub fn backward_visits(&self) -> usize {
        self.visits
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient buffer for `v`, available after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if self.done {
            Some(&self.grads[v.0])
        } else {
            None
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let n = value.numel();
        self.ops.push(op);
        self.requires.push(requires);
        self.values.push(value);
        self.grads.push(vec![0.0; n]);
        Ok(Var(self.ops.len() - 1))
    }

    /// Records a leaf. Gradients flow to leaves with `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let rg = t.requires_grad;
        let mut v = t.clone();
        v.grad = None;
        self.push(Op::Leaf, v, rg, "leaf")
    }

    /// Records a constant; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Constant, t, false, "constant")
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.values[a.0].shape, &self.values[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let da = &self.values[a.0].data;
        let db = &self.values[b.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let row = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * row[j];
                }
            }
        }
        let rg = self.req(a) || self.req(b);
        self.push(
            Op::MatMul { a: a.0, b: b.0 },
            Tensor::new(vec![m, n], out)?,
            rg,
            "matmul",
        )
    }

    /// 3x3 cross-correlation, stride in {1,2}, pad in {0,1}.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.values[x.0].shape.clone();
        let sk = self.values[k.0].shape.clone();
        if sx.len() != 3 || sk.len() != 4 || sk[2] != 3 || sk[3] != 3 || sx[0] != sk[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: sx,
                right: sk,
            });
        }
        if !matches!(stride, 1 | 2) || pad > 1 {
            return Err(Error::Dimension(format!(
                "conv2d: stride {stride} / pad {pad} unsupported"
            )));
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let cout = sk[0];
        if h + 2 * pad < 3 || w + 2 * pad < 3 {
            return Err(Error::Dimension(format!(
                "conv2d: non-positive output extent for input {h}x{w} pad {pad}"
            )));
        }
        let ho = (h + 2 * pad - 3) / stride + 1;
        let wo = (w + 2 * pad - 3) / stride + 1;
        let dx = &self.values[x.0].data;
        let dk = &self.values[k.0].data;
        let mut out = vec![0.0; cout * ho * wo];
        for oc in 0..cout {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..cin {
                        for ki in 0..3 {
                            let xi = (oi * stride + ki) as isize - pad as isize;
                            if xi < 0 || xi >= h as isize {
                                continue;
                            }
                            for kj in 0..3 {
                                let xj = (oj * stride + kj) as isize - pad as isize;
                                if xj < 0 || xj >= w as isize {
                                    continue;
                                }
                                acc += dk[((oc * cin + ic) * 3 + ki) * 3 + kj]
                                    * dx[(ic * h + xi as usize) * w + xj as usize];
                            }
                        }
                    }
                    out[(oc * ho + oi) * wo + oj] = acc;
                }
            }
        }
        let rg = self.req(x) || self.req(k);
        self.push(
            Op::Conv2d {
                x: x.0,
                k: k.0,
                stride,
                pad,
            },
            Tensor::new(vec![cout, ho, wo], out)?,
            rg,
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = &self.values[x.0];
        let out = v.data.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let t = Tensor::new(v.shape.clone(), out)?;
        let rg = self.req(x);
        self.push(Op::Relu { x: x.0 }, t, rg, "relu")
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = &self.values[x.0];
        let t = Tensor::new(v.shape.clone(), v.data.iter().map(|a| a + c).collect())?;
        let rg = self.req(x);
        self.push(Op::AddConst { x: x.0 }, t, rg, "add_const")
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = &self.values[x.0];
        let t = Tensor::new(v.shape.clone(), v.data.iter().map(|a| a * c).collect())?;
        let rg = self.req(x);
        self.push(Op::ScaleConst { x: x.0, c }, t, rg, "scale_const")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.values[a.0].shape, &self.values[b.0].shape);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add_tensor",
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        let da = &self.values[a.0].data;
        let db = &self.values[b.0].data;
        let t = Tensor::new(sa.clone(), da.iter().zip(db).map(|(x, y)| x + y).collect())?;
        let rg = self.req(a) || self.req(b);
        self.push(Op::AddTensor { a: a.0, b: b.0 }, t, rg, "add_tensor")
    }

    /// Elementwise product of a tensor with a scalar variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.values[s.0].numel() != 1 {
            return Err(Error::NonScalarLoss(self.values[s.0].shape.clone()));
        }
        let sv = self.values[s.0].data[0];
        let v = &self.values[x.0];
        let t = Tensor::new(v.shape.clone(), v.data.iter().map(|a| a * sv).collect())?;
        let rg = self.req(x) || self.req(s);
        self.push(Op::MulScalar { x: x.0, s: s.0 }, t, rg, "mul_scalar")
    }

    /// Extracts element `i` (flat index) as a scalar.
    pub fn index_scalar(&mut self, x: Var, i: usize) -> Result<Var> {
        let v = &self.values[x.0];
        if i >= v.numel() {
            return Err(Error::Index(format!(
                "index {} out of range for {} elements",
                i,
                v.numel()
            )));
        }
        let t = Tensor::scalar(v.data[i]);
        let rg = self.req(x);
        self.push(Op::IndexScalar { x: x.0, i }, t, rg, "index_scalar")
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let v = &self.values[x.0];
        let out = v.data.iter().map(|&a| softplus(a)).collect();
        let t = Tensor::new(v.shape.clone(), out)?;
        let rg = self.req(x);
        self.push(Op::Softplus { x: x.0 }, t, rg, "softplus")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = &self.values[x.0];
        let t = Tensor::new(v.shape.clone(), v.data.iter().map(|a| a * a).collect())?;
        let rg = self.req(x);
        self.push(Op::Square { x: x.0 }, t, rg, "square")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.values[x.0].data.iter().sum();
        let rg = self.req(x);
        self.push(Op::Sum { x: x.0 }, Tensor::scalar(s), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.values[x.0].numel() as f64;
        let s = self.sum(x)?;
        self.scale_const(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = &self.values[x.0];
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: v.shape.clone(),
                right: shape,
            });
        }
        let t = Tensor::new(shape, v.data.clone())?;
        let rg = self.req(x);
        self.push(Op::Reshape { x: x.0 }, t, rg, "reshape")
    }

    /// c x H x W -> (H*W) x c, pixels as rows.
    pub fn channels_to_rows(&mut self, x: Var) -> Result<Var> {
        let v = &self.values[x.0];
        if v.shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "channels_to_rows expects c x H x W, got {:?}",
                v.shape
            )));
        }
        let (c, h, w) = (v.shape[0], v.shape[1], v.shape[2]);
        let hw = h * w;
        let mut out = vec![0.0; hw * c];
        for ch in 0..c {
            for p in 0..hw {
                out[p * c + ch] = v.data[ch * hw + p];
            }
        }
        let rg = self.req(x);
        self.push(
            Op::ChannelsToRows { x: x.0 },
            Tensor::new(vec![hw, c], out)?,
            rg,
            "channels_to_rows",
        )
    }

    /// Row-wise log-softmax over a batch x C matrix, max-subtracted.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = &self.values[x.0];
        if v.shape.len() != 2 || v.shape[1] < 2 {
            return Err(Error::Dimension(format!(
                "log_softmax expects batch x C with C >= 2, got {:?}",
                v.shape
            )));
        }
        let (b, c) = (v.shape[0], v.shape[1]);
        let mut out = vec![0.0; b * c];
        for r in 0..b {
            let row = &v.data[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[r * c + j] = row[j] - lse;
            }
        }
        let rg = self.req(x);
        self.push(
            Op::LogSoftmax { x: x.0 },
            Tensor::new(vec![b, c], out)?,
            rg,
            "log_softmax",
        )
    }

    /// Negative mean of per-row log-probabilities at the label index.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let v = &self.values[logp.0];
        if v.shape.len() != 2 || v.shape[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "nll_from_logprob",
                left: v.shape.clone(),
                right: vec![labels.len()],
            });
        }
        let (b, c) = (v.shape[0], v.shape[1]);
        let mut acc = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::Index(format!("label {l} out of range for {c} classes")));
            }
            acc -= v.data[r * c + l];
        }
        let rg = self.req(logp);
        self.push(
            Op::Nll {
                logp: logp.0,
                labels: labels.to_vec(),
            },
            Tensor::scalar(acc / b as f64),
            rg,
            "nll_from_logprob",
        )
    }

    /// Per-pixel NLL where label -1 marks ignored rows.
    pub fn masked_nll(&mut self, logp: Var, labels: &[i64]) -> Result<Var> {
        let v = &self.values[logp.0];
        if v.shape.len() != 2 || v.shape[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_nll",
                left: v.shape.clone(),
                right: vec![labels.len()],
            });
        }
        let c = v.shape[1];
        let mut acc = 0.0;
        let mut count = 0usize;
        for (r, &l) in labels.iter().enumerate() {
            if l < 0 {
                continue;
            }
            let l = l as usize;
            if l >= c {
                return Err(Error::Index(format!("label {l} out of range for {c} classes")));
            }
            acc -= v.data[r * c + l];
            count += 1;
        }
        if count == 0 {
            return Err(Error::Dimension("masked_nll: all labels ignored".into()));
        }
        let rg = self.req(logp);
        self.push(
            Op::MaskedNll {
                logp: logp.0,
                labels: labels.to_vec(),
                count,
            },
            Tensor::scalar(acc / count as f64),
            rg,
            "masked_nll",
        )
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (&self.values[pred.0].shape, &self.values[target.0].shape);
        if sp != st {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                left: sp.clone(),
                right: st.clone(),
            });
        }
        let dp = &self.values[pred.0].data;
        let dt = &self.values[target.0].data;
        let n = dp.len() as f64;
        let s: f64 = dp.iter().zip(dt).map(|(p, t)| (p - t) * (p - t)).sum();
        let rg = self.req(pred) || self.req(target);
        self.push(
            Op::Mse {
                pred: pred.0,
                target: target.0,
            },
            Tensor::scalar(s / n),
            rg,
            "mse_loss",
        )
    }

    /// Sampling grid for a 3x3 homogeneous transform, align-corners.
    pub fn affine_grid(&mut self, g: Var, h: usize, w: usize) -> Result<Var> {
        let sg = &self.values[g.0].shape;
        if sg != &[3, 3] {
            return Err(Error::Dimension(format!(
                "affine_grid expects a 3x3 transform, got {sg:?}"
            )));
        }
        if h < 2 || w < 2 {
            return Err(Error::Dimension(format!("affine_grid: extents {h}x{w} too small")));
        }
        let m = &self.values[g.0].data;
        let mut out = vec![0.0; h * w * 2];
        for i in 0..h {
            let v = -1.0 + 2.0 * i as f64 / (h - 1) as f64;
            for j in 0..w {
                let u = -1.0 + 2.0 * j as f64 / (w - 1) as f64;
                out[(i * w + j) * 2] = m[0] * u + m[1] * v + m[2];
                out[(i * w + j) * 2 + 1] = m[3] * u + m[4] * v + m[5];
            }
        }
        let rg = self.req(g);
        self.push(
            Op::AffineGrid { g: g.0, h, w },
            Tensor::new(vec![h, w, 2], out)?,
            rg,
            "affine_grid",
        )
    }

    /// Bilinear sampling with zero padding outside the source image.
    pub fn bilinear_sample(&mut self, x: Var, grid: Var) -> Result<Var> {
        let sx = self.values[x.0].shape.clone();
        let sg = self.values[grid.0].shape.clone();
        if sx.len() != 3 || sg.len() != 3 || sg[2] != 2 {
            return Err(Error::ShapeMismatch {
                op: "bilinear_sample",
                left: sx,
                right: sg,
            });
        }
        let (c, hi, wi) = (sx[0], sx[1], sx[2]);
        let (ho, wo) = (sg[0], sg[1]);
        let dx = &self.values[x.0].data;
        let dg = &self.values[grid.0].data;
        let mut out = vec![0.0; c * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let xs = dg[(i * wo + j) * 2];
                let ys = dg[(i * wo + j) * 2 + 1];
                let px = (xs + 1.0) * 0.5 * (wi - 1) as f64;
                let py = (ys + 1.0) * 0.5 * (hi - 1) as f64;
                let x0 = px.floor();
                let y0 = py.floor();
                let wx = px - x0;
                let wy = py - y0;
                let (x0, y0) = (x0 as isize, y0 as isize);
                let fetch = |d: &[f64], ch: usize, yy: isize, xx: isize| -> f64 {
                    if yy < 0 || yy >= hi as isize || xx < 0 || xx >= wi as isize {
                        0.0
                    } else {
                        d[(ch * hi + yy as usize) * wi + xx as usize]
                    }
                };
                for ch in 0..c {
                    let v00 = fetch(dx, ch, y0, x0);
                    let v01 = fetch(dx, ch, y0, x0 + 1);
                    let v10 = fetch(dx, ch, y0 + 1, x0);
                    let v11 = fetch(dx, ch, y0 + 1, x0 + 1);
                    out[(ch * ho + i) * wo + j] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                        + wy * ((1.0 - wx) * v10 + wx * v11);
                }
            }
        }
        let rg = self.req(x) || self.req(grid);
        self.push(
            Op::Bilinear { x: x.0, grid: grid.0 },
            Tensor::new(vec![c, ho, wo], out)?,
            rg,
            "bilinear_sample",
        )
    }

    /// Additive brightness shift clamped to [0, 255].
    pub fn brightness(&mut self, x: Var, t: Var) -> Result<Var> {
        if self.values[t.0].numel() != 1 {
            return Err(Error::NonScalarLoss(self.values[t.0].shape.clone()));
        }
        let tv = self.values[t.0].data[0];
        let v = &self.values[x.0];
        let out = v.data.iter().map(|&c| (c + tv).clamp(0.0, 255.0)).collect();
        let tns = Tensor::new(v.shape.clone(), out)?;
        let rg = self.req(x) || self.req(t);
        self.push(Op::Brightness { x: x.0, t: t.0 }, tns, rg, "brightness_adjust")
    }

    /// Contrast remap about 128: clamp(F(t) * (c - 128) + 128) with
    /// F(t) = 259(t + 255) / (255(259 - t)).
    pub fn contrast(&mut self, x: Var, t: Var) -> Result<Var> {
        if self.values[t.0].numel() != 1 {
            return Err(Error::NonScalarLoss(self.values[t.0].shape.clone()));
        }
        let tv = self.values[t.0].data[0];
        if tv >= 259.0 {
            return Err(Error::Domain(format!("contrast factor pole: t = {tv} >= 259")));
        }
        let f = contrast_factor(tv);
        let v = &self.values[x.0];
        let out = v
            .data
            .iter()
            .map(|&c| (f * (c - 128.0) + 128.0).clamp(0.0, 255.0))
            .collect();
        let tns = Tensor::new(v.shape.clone(), out)?;
        let rg = self.req(x) || self.req(t);
        self.push(Op::Contrast { x: x.0, t: t.0 }, tns, rg, "contrast_adjust")
    }

    /// Rotation + normalized translation affine of Appendix-style form:
    /// [[cos t1, -sin t1, 2 t2/(w+h)], [sin t1, cos t1, 2 t3/(w+h)], [0,0,1]].
    pub fn rot_trans_affine(&mut self, t: Var, w: f64, h: f64) -> Result<Var> {
        if self.values[t.0].numel() != 3 {
            return Err(Error::Dimension(format!(
                "rot_trans_affine expects 3 parameters, got {:?}",
                self.values[t.0].shape
            )));
        }
        let d = &self.values[t.0].data;
        let (c, s) = (d[0].cos(), d[0].sin());
        let k = 2.0 / (w + h);
        let m = vec![c, -s, k * d[1], s, c, k * d[2], 0.0, 0.0, 1.0];
        let rg = self.req(t);
        self.push(
            Op::RotTransAffine { t: t.0, w, h },
            Tensor::new(vec![3, 3], m)?,
            rg,
            "rot_trans_affine",
        )
    }

    /// Single reverse sweep from a scalar loss. Errors on a second call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.done {
            return Err(Error::BackwardTwice);
        }
        if self.values[loss.0].numel() != 1 {
            return Err(Error::NonScalarLoss(self.values[loss.0].shape.clone()));
        }
        self.done = true;
        self.visits = 0;
        self.grads[loss.0][0] = 1.0;
        for idx in (0..self.ops.len()).rev() {
            self.visits += 1;
            let op = self.ops[idx].clone();
            let (head, tail) = self.grads.split_at_mut(idx);
            let g: &[f64] = &tail[0];
            let vals = &self.values;
            match op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul { a, b } => {
                    let sa = &vals[a].shape;
                    let (m, k) = (sa[0], sa[1]);
                    let n = vals[b].shape[1];
                    let da = &vals[a].data;
                    let db = &vals[b].data;
                    // da += g . b^T ; db += a^T . g
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * db[p * n + j];
                            }
                            head[a][i * k + p] += acc;
                        }
                    }
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += da[i * k + p] * g[i * n + j];
                            }
                            head[b][p * n + j] += acc;
                        }
                    }
                }
                Op::Conv2d { x, k, stride, pad } => {
                    let sx = &vals[x].shape;
                    let sk = &vals[k].shape;
                    let (cin, h, w) = (sx[0], sx[1], sx[2]);
                    let cout = sk[0];
                    let ho = (h + 2 * pad - 3) / stride + 1;
                    let wo = (w + 2 * pad - 3) / stride + 1;
                    let dx = &vals[x].data;
                    let dk = &vals[k].data;
                    let (gx_buf, gk_buf) = if x < k {
                        let (lo, hi) = head.split_at_mut(k);
                        (&mut lo[x], &mut hi[0])
                    } else {
                        let (lo, hi) = head.split_at_mut(x);
                        (&mut hi[0], &mut lo[k])
                    };
                    for oc in 0..cout {
                        for oi in 0..ho {
                            for oj in 0..wo {
                                let go = g[(oc * ho + oi) * wo + oj];
                                if go == 0.0 {
                                    continue;
                                }
                                for ic in 0..cin {
                                    for ki in 0..3 {
                                        let xi = (oi * stride + ki) as isize - pad as isize;
                                        if xi < 0 || xi >= h as isize {
                                            continue;
                                        }
                                        for kj in 0..3 {
                                            let xj = (oj * stride + kj) as isize - pad as isize;
                                            if xj < 0 || xj >= w as isize {
                                                continue;
                                            }
                                            let xidx = (ic * h + xi as usize) * w + xj as usize;
                                            let kidx = ((oc * cin + ic) * 3 + ki) * 3 + kj;
                                            gx_buf[xidx] += go * dk[kidx];
                                            gk_buf[kidx] += go * dx[xidx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Relu { x } => {
                    let dx = &vals[x].data;
                    for (i, &v) in dx.iter().enumerate() {
                        if v > 0.0 {
                            head[x][i] += g[i];
                        }
                    }
                }
                Op::AddConst { x } => {
                    for (gx, gi) in head[x].iter_mut().zip(g) {
                        *gx += gi;
                    }
                }
                Op::ScaleConst { x, c } => {
                    for (gx, gi) in head[x].iter_mut().zip(g) {
                        *gx += c * gi;
                    }
                }
                Op::AddTensor { a, b } => {
                    for (i, gi) in g.iter().enumerate() {
                        head[a][i] += gi;
                    }
                    for (i, gi) in g.iter().enumerate() {
                        head[b][i] += gi;
                    }
                }
                Op::MulScalar { x, s } => {
                    let sv = vals[s].data[0];
                    let dx = &vals[x].data;
                    let mut gs = 0.0;
                    for (i, gi) in g.iter().enumerate() {
                        head[x][i] += sv * gi;
                        gs += dx[i] * gi;
                    }
                    head[s][0] += gs;
                }
                Op::IndexScalar { x, i } => {
                    head[x][i] += g[0];
                }
                Op::Softplus { x } => {
                    let dx = &vals[x].data;
                    for (i, gi) in g.iter().enumerate() {
                        head[x][i] += gi * sigmoid(dx[i]);
                    }
                }
                Op::Square { x } => {
                    let dx = &vals[x].data;
                    for (i, gi) in g.iter().enumerate() {
                        head[x][i] += 2.0 * dx[i] * gi;
                    }
                }
                Op::Sum { x } => {
                    for gx in head[x].iter_mut() {
                        *gx += g[0];
                    }
                }
                Op::Reshape { x } => {
                    for (i, gi) in g.iter().enumerate() {
                        head[x][i] += gi;
                    }
                }
                Op::ChannelsToRows { x } => {
                    let sx = &vals[x].shape;
                    let (c, hw) = (sx[0], sx[1] * sx[2]);
                    for ch in 0..c {
                        for p in 0..hw {
                            head[x][ch * hw + p] += g[p * c + ch];
                        }
                    }
                }
                Op::LogSoftmax { x } => {
                    let out = &vals[idx].data;
                    let (b, c) = (vals[idx].shape[0], vals[idx].shape[1]);
                    for r in 0..b {
                        let gsum: f64 = g[r * c..(r + 1) * c].iter().sum();
                        for j in 0..c {
                            head[x][r * c + j] += g[r * c + j] - out[r * c + j].exp() * gsum;
                        }
                    }
                }
                Op::Nll { logp, labels } => {
                    let c = vals[logp].shape[1];
                    let b = labels.len() as f64;
                    for (r, &l) in labels.iter().enumerate() {
                        head[logp][r * c + l] -= g[0] / b;
                    }
                }
                Op::MaskedNll { logp, labels, count } => {
                    let c = vals[logp].shape[1];
                    for (r, &l) in labels.iter().enumerate() {
                        if l >= 0 {
                            head[logp][r * c + l as usize] -= g[0] / count as f64;
                        }
                    }
                }
                Op::Mse { pred, target } => {
                    let dp = &vals[pred].data;
                    let dt = &vals[target].data;
                    let n = dp.len() as f64;
                    for i in 0..dp.len() {
                        let d = 2.0 * (dp[i] - dt[i]) * g[0] / n;
                        head[pred][i] += d;
                        if self.requires[target] {
                            head[target][i] -= d;
                        }
                    }
                }
                Op::AffineGrid { g: gm, h, w } => {
                    let gg = &mut head[gm];
                    for i in 0..h {
                        let v = -1.0 + 2.0 * i as f64 / (h - 1) as f64;
                        for j in 0..w {
                            let u = -1.0 + 2.0 * j as f64 / (w - 1) as f64;
                            let gx = g[(i * w + j) * 2];
                            let gy = g[(i * w + j) * 2 + 1];
                            gg[0] += gx * u;
                            gg[1] += gx * v;
                            gg[2] += gx;
                            gg[3] += gy * u;
                            gg[4] += gy * v;
                            gg[5] += gy;
                        }
                    }
                }
                Op::Bilinear { x, grid } => {
                    let sx = &vals[x].shape;
                    let (c, hi, wi) = (sx[0], sx[1], sx[2]);
                    let sg = &vals[grid].shape;
                    let (ho, wo) = (sg[0], sg[1]);
                    let dx = &vals[x].data;
                    let dg = &vals[grid].data;
                    let (gx_buf, gg_buf) = if x < grid {
                        let (lo, hi2) = head.split_at_mut(grid);
                        (&mut lo[x], &mut hi2[0])
                    } else {
                        let (lo, hi2) = head.split_at_mut(x);
                        (&mut hi2[0], &mut lo[grid])
                    };
                    for i in 0..ho {
                        for j in 0..wo {
                            let xs = dg[(i * wo + j) * 2];
                            let ys = dg[(i * wo + j) * 2 + 1];
                            let px = (xs + 1.0) * 0.5 * (wi - 1) as f64;
                            let py = (ys + 1.0) * 0.5 * (hi - 1) as f64;
                            let x0f = px.floor();
                            let y0f = py.floor();
                            let wx = px - x0f;
                            let wy = py - y0f;
                            let (x0, y0) = (x0f as isize, y0f as isize);
                            let inb = |yy: isize, xx: isize| {
                                yy >= 0 && yy < hi as isize && xx >= 0 && xx < wi as isize
                            };
                            let mut dpx = 0.0;
                            let mut dpy = 0.0;
                            for ch in 0..c {
                                let go = g[(ch * ho + i) * wo + j];
                                if go == 0.0 {
                                    continue;
                                }
                                let fetch = |yy: isize, xx: isize| -> f64 {
                                    if inb(yy, xx) {
                                        dx[(ch * hi + yy as usize) * wi + xx as usize]
                                    } else {
                                        0.0
                                    }
                                };
                                let v00 = fetch(y0, x0);
                                let v01 = fetch(y0, x0 + 1);
                                let v10 = fetch(y0 + 1, x0);
                                let v11 = fetch(y0 + 1, x0 + 1);
                                // scatter into the source image
                                let mut scatter = |yy: isize, xx: isize, wgt: f64| {
                                    if inb(yy, xx) {
                                        gx_buf[(ch * hi + yy as usize) * wi + xx as usize] +=
                                            go * wgt;
                                    }
                                };
                                scatter(y0, x0, (1.0 - wy) * (1.0 - wx));
                                scatter(y0, x0 + 1, (1.0 - wy) * wx);
                                scatter(y0 + 1, x0, wy * (1.0 - wx));
                                scatter(y0 + 1, x0 + 1, wy * wx);
                                dpx += go * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
                                dpy += go * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
                            }
                            gg_buf[(i * wo + j) * 2] += dpx * 0.5 * (wi - 1) as f64;
                            gg_buf[(i * wo + j) * 2 + 1] += dpy * 0.5 * (hi - 1) as f64;
                        }
                    }
                }
                Op::Brightness { x, t } => {
                    let tv = vals[t].data[0];
                    let dx = &vals[x].data;
                    let mut gt = 0.0;
                    for (i, gi) in g.iter().enumerate() {
                        let y = dx[i] + tv;
                        if y > 0.0 && y < 255.0 {
                            head[x][i] += gi;
                            gt += gi;
                        }
                    }
                    head[t][0] += gt;
                }
                Op::Contrast { x, t } => {
                    let tv = vals[t].data[0];
                    let f = contrast_factor(tv);
                    let fp = 259.0 / 255.0 * 514.0 / ((259.0 - tv) * (259.0 - tv));
                    let dx = &vals[x].data;
                    let mut gt = 0.0;
                    for (i, gi) in g.iter().enumerate() {
                        let y = f * (dx[i] - 128.0) + 128.0;
                        if y > 0.0 && y < 255.0 {
                            head[x][i] += gi * f;
                            gt += gi * (dx[i] - 128.0) * fp;
                        }
                    }
                    head[t][0] += gt;
                }
                Op::RotTransAffine { t, w, h } => {
                    let d = &vals[t].data;
                    let (c, s) = (d[0].cos(), d[0].sin());
                    let k = 2.0 / (w + h);
                    head[t][0] += -s * g[0] - c * g[1] + c * g[3] - s * g[4];
                    head[t][1] += k * g[2];
                    head[t][2] += k * g[5];
                }
            }
        }
        Ok(())
    }
}

/// Overflow-safe log(1 + exp(x)).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of the softplus map, for initializing raw widths.
pub fn softplus_inverse(y: f64) -> f64 {
    // log(exp(y) - 1), stable for small y via expm1
    y.exp_m1().ln()
}

pub(crate) fn contrast_factor(t: f64) -> f64 {
    259.0 * (t + 255.0) / (255.0 * (259.0 - t))
}
