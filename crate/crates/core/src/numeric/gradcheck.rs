use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central finite
/// differences. Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps must lie in [1e-6, 1e-3], got {eps}")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = f(tape.constant(t.clone()))?.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let y = f(xv)?;
    if !y.item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let analytic = tape.backward(y)?.wrt_or_zero(xv);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
