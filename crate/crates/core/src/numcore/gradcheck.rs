//! Input gradients of recorded scalar computations and their finite-difference check.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Components whose analytic and numeric magnitudes both fall at or below this
/// are skipped by [`finite_difference_check`].
pub const FD_MAGNITUDE_FLOOR: f64 = 1e-8;

/// Evaluates `f` on a fresh tape at `x` and returns the scalar value.
pub fn evaluate<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = f(&tape, xv)?;
    tape.scalar(out)
}

/// Exact reverse-mode gradient of the scalar computation `f` at `x`.
pub fn input_gradient<F>(f: &F, x: &Tensor) -> Result<(f64, Tensor)>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.variable(x.clone());
    let out = f(&tape, xv)?;
    let value = tape.scalar(out)?;
    let mut g = tape.gradients(out, &[xv])?;
    Ok((value, g.remove(0)))
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference<F>(f: &F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Largest component-wise relative error between two gradients, over
/// components whose magnitude exceeds [`FD_MAGNITUDE_FLOOR`].
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .filter_map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            (scale > FD_MAGNITUDE_FLOOR).then(|| (a - n).abs() / scale)
        })
        .fold(0.0, f64::max)
}

/// Compares [`input_gradient`] against [`central_difference`] and returns the
/// maximum relative error.
pub fn finite_difference_check<F>(f: &F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let (_, analytic) = input_gradient(f, x)?;
    let numeric = central_difference(f, x, h)?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.7 - 1.3);
        let f = |t: &Tape, v: Var| t.sum_squares(v);
        let err = finite_difference_check(&f, &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn zero_step_rejected() {
        let x = Tensor::zeros(&[1, 1]);
        let f = |t: &Tape, v: Var| t.sum(v);
        assert!(finite_difference_check(&f, &x, 0.0).is_err());
    }
}
