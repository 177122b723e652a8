use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// max over i of |a_i - b_i| / max(1, |a_i|).
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of scalar `f` at `point` with central differences of step `h`.
///
/// `f` is re-evaluated on a fresh tape for every perturbation, so it must be
/// a pure function of its input.
pub fn finite_diff_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite difference step must be > 0, got {h}"
        )));
    }
    let eval = |x: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(x);
        let y = f(&tape, v)?;
        if y.value().numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "finite_diff_check needs a scalar function, got shape {:?}",
                y.shape()
            )));
        }
        y.item()
    };

    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(point.clone().with_requires_grad(true));
        let y = f(&tape, x)?;
        if y.value().numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "finite_diff_check needs a scalar function, got shape {:?}",
                y.shape()
            )));
        }
        let grads = tape.backward(y)?;
        grads
            .get(x)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; point.numel()])
    };

    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok(max_relative_error(&analytic, &numeric))
}
