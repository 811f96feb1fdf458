//! Central finite-difference check of [`Tape::backward`].

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against per-coordinate
/// central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// `f` receives a fresh tape and the input variable and must return a scalar
/// output var. Returns the largest relative error, using
/// `max(|a|, |b|, 1e-8)` as the denominator.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Parameter(alloc::format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        let val = tape.value(out);
        if !val.is_scalar() {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        let s = val.data()[0];
        if !s.is_finite() {
            return Err(Error::Evaluation("function value is not finite".into()));
        }
        Ok(s)
    };

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.wrt(xv);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::new(vec![3], vec![0.5, -2.0, 3.0]).unwrap();
        let x = Tensor::new(vec![3], vec![1.0, 2.0, -1.0]).unwrap();
        let err = grad_check(
            |tape, x| {
                let c = tape.constant(w.clone());
                let p = tape.mul(x, c)?;
                tape.sum(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(matches!(grad_check(|t, x| t.sum(x), &x, 0.0), Err(Error::Parameter(_))));
    }
}
