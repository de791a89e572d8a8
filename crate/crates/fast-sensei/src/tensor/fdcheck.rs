//! Central-difference gradient checking in f64.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares an analytic gradient against central differences of `f` at `x`.
///
/// Returns the max over coordinates of
/// `|analytic - cd| / (|analytic| + |cd| + 1e-12)`.
/// `f` must be evaluable at every probe point `x +- h*e_i`.
pub fn finite_diff_check<F>(
    mut f: F,
    x: &Tensor<f64>,
    h: f64,
    analytic: &Tensor<f64>,
) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if analytic.shape() != x.shape() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("analytic {:?} vs x {:?}", analytic.shape(), x.shape()),
        ));
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid("finite_diff_check", format!("step {h}")));
    }
    let mut probe = x.clone();
    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_check" });
        }
        let cd = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - cd).abs() / (a.abs() + cd.abs() + 1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_checks_to_machine_precision() {
        // f(x) = 3*x0 - 2*x1 + 0.5*x2
        let coef = [3.0, -2.0, 0.5];
        let x = Tensor::from_vec(&[3], vec![0.4, -1.3, 2.2]).unwrap();
        let analytic = Tensor::from_vec(&[3], coef.to_vec()).unwrap();
        let f = |t: &Tensor<f64>| {
            Ok(t.data().iter().zip(&coef).map(|(&v, &c)| v * c).sum::<f64>())
        };
        let err = finite_diff_check(f, &x, 1e-5, &analytic).unwrap();
        assert!(err < 1e-9, "linear fd error {err}");
    }

    #[test]
    fn quadratic_function_stays_under_documented_bound() {
        // f(x) = sum x^2, grad = 2x; spec point for h = 1e-5 is err <= 1e-6
        let x = Tensor::from_vec(&[4], vec![0.7, -0.3, 1.9, -2.4]).unwrap();
        let analytic = x.map(|v| 2.0 * v);
        let f = |t: &Tensor<f64>| Ok(t.data().iter().map(|&v| v * v).sum::<f64>());
        let err = finite_diff_check(f, &x, 1e-5, &analytic).unwrap();
        assert!(err <= 1e-6, "quadratic fd error {err}");
    }

    #[test]
    fn shape_mismatch_and_bad_step_are_errors() {
        let x = Tensor::<f64>::zeros(&[3]);
        let a = Tensor::<f64>::zeros(&[4]);
        let f = |_: &Tensor<f64>| Ok(0.0);
        assert!(finite_diff_check(f, &x, 1e-5, &a).is_err());
        let a3 = Tensor::<f64>::zeros(&[3]);
        assert!(finite_diff_check(f, &x, 0.0, &a3).is_err());
        assert!(finite_diff_check(f, &x, -1e-5, &a3).is_err());
    }

    #[test]
    fn non_finite_probe_value_is_an_error() {
        let x = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let a = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let g = |_: &Tensor<f64>| Ok(f64::NAN);
        assert!(finite_diff_check(g, &x, 1e-5, &a).is_err());
    }
}
