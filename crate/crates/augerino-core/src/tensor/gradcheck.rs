//! Central finite-difference checking of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Max relative error between the tape gradient of `f` at `x` and a central
/// finite difference with the given step.
///
/// `f` must build a scalar from the supplied leaf and be deterministic;
/// a mismatch between two evaluations is reported as a contract error.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    assert!(step > 0.0, "grad_check: step must be positive");
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let mut leaf_t = t.clone();
        leaf_t.requires_grad = false;
        let v = tape.leaf(&leaf_t)?;
        let loss = f(&mut tape, v)?;
        let val = tape.value(loss);
        if !val.is_scalar() {
            return Err(Error::NonScalarLoss(val.shape.clone()));
        }
        Ok(val.scalar_value())
    };

    let base1 = eval(x)?;
    let base2 = eval(x)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::NonDeterministic);
    }

    // analytic gradient
    let mut tape = Tape::new();
    let mut xg = x.clone();
    xg.requires_grad = true;
    let v = tape.leaf(&xg)?;
    let loss = f(&mut tape, v)?;
    tape.backward(loss)?;
    let analytic = tape.grad(v).expect("backward ran").to_vec();

    let mut max_err = 0.0f64;
    let mut probe = x.clone();
    for i in 0..probe.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / f64::max(1.0, analytic[i].abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
