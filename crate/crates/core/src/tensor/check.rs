//! Numerical gradient verification.
//!
//! `grad_check` compares a tape gradient against central finite differences
//! coordinate by coordinate and reports the worst relative error. It is the
//! oracle behind the gradient tests: every differentiable operation is
//! checked against it rather than against hand-derived expected values.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Val};

/// Maximum relative error between the tape gradient of `f` at `x` and a
/// central finite difference with step `h` (1e-6 is a good default).
///
/// `f` must build a scalar from the single tracked input it is given; any
/// other tensors it needs should be bound as leaves inside the closure. The
/// denominator of each relative error is `max(1, |analytic|, |numeric|)`, so
/// tiny gradients are compared absolutely. The finite difference divides by
/// the exactly-representable achieved step `fl(x+h) - fl(x-h)` rather than
/// `2h`, which keeps linear functions exact.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Val) -> Result<Val>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidConfig(format!("grad_check step must be positive, got {h}")));
    }

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    let yt = tape.value(y)?;
    if !yt.is_scalar() {
        return Err(Error::NonScalarLoss { shape: yt.shape().to_vec() });
    }
    tape.backward(y)?;
    let analytic = tape.grad(xv)?;

    let eval = |pt: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.param(pt.clone());
        let out = f(&mut t, v)?;
        t.value(out)?.scalar_value()
    };

    let mut worst = 0.0_f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let step = plus.data()[i] - minus.data()[i];
        let numeric = (eval(&plus)? - eval(&minus)?) / step;
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
