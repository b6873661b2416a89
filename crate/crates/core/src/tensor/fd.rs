//! Central-difference gradient checking. The probe rebuilds the graph from
//! scratch for every perturbed coordinate, so it shares no state with the
//! reverse-mode path it is validating.

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::value::Tensor;

/// Compares reverse-mode gradients of `build` (a scalar-valued graph of one
/// input) against central differences at `point`. Returns the maximum over
/// coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_difference_check<F>(build: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("finite_difference_check", "eps must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true)?;
    let loss = build(&mut tape, x)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::invalid(
            "finite_difference_check",
            "build must produce a scalar",
        ));
    }
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(x)
        .ok_or_else(|| Error::invalid("finite_difference_check", "input has no gradient"))?
        .clone();

    let eval = |data: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let xv = t.leaf(data.clone(), false)?;
        let l = build(&mut t, xv)?;
        Ok(t.value(l).data()[0])
    };

    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
