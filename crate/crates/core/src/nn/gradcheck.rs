//! Central finite-difference comparison against analytic gradients.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over checked coordinates of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// Coordinates where the one-sided slopes disagree (a kink such as a
    /// ReLU boundary lies inside `[x − eps, x + eps]`); excluded from the max.
    pub flagged: Vec<usize>,
}

/// Compares the analytic gradient returned by `f` against central
/// differences at every coordinate of `point`.
///
/// `f` returns `(value, gradient)`; only the value is used at perturbed
/// points.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<GradCheck>
where
    F: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let (f0, analytic) = f(point)?;
    if analytic.shape() != point.shape() {
        return Err(Error::dim(format!(
            "gradient shape {:?} differs from point {:?}",
            analytic.shape(),
            point.shape()
        )));
    }
    if !f0.is_finite() {
        return Err(Error::Numeric(format!("f is not finite at the base point: {f0}")));
    }
    let value_at = |i: usize, delta: f64| -> Result<f64> {
        let mut p = point.clone();
        p.data_mut()[i] += delta;
        let (v, _) = f(&p)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("f is not finite at coordinate {i} {delta:+e}")));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut flagged = Vec::new();
    for i in 0..point.numel() {
        let plus = value_at(i, eps)?;
        let minus = value_at(i, -eps)?;
        let central = (plus - minus) / (2.0 * eps);
        let forward = (plus - f0) / eps;
        let backward = (f0 - minus) / eps;
        let scale = 1.0f64.max(central.abs());
        // Smooth functions have |forward − backward| ≈ eps·|f''|; a jump in
        // slope is orders of magnitude larger.
        if (forward - backward).abs() > 1e-3 * scale {
            flagged.push(i);
            continue;
        }
        let a = analytic.data()[i];
        worst = worst.max((a - central).abs() / 1.0f64.max(a.abs()));
    }
    Ok(GradCheck {
        max_rel_error: worst,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_sq(x: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        let v = x.data().iter().map(|a| a * a).sum();
        Ok((v, x.map(|a| 2.0 * a)))
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let p = Tensor::from_f64(&[5], &[0.3, -1.2, 2.5, 0.0, 7.1]).unwrap();
        let r = finite_diff_check(sum_sq, &p, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-8, "{}", r.max_rel_error);
        assert!(r.flagged.is_empty());
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let r = finite_diff_check(|x| Ok((4.0, Tensor::zeros(x.shape()))), &p, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-12);
    }

    #[test]
    fn relu_kink_is_flagged() {
        let p = Tensor::from_f64(&[3], &[0.0, 1.0, -1.0]).unwrap();
        let relu_sum = |x: &Tensor<f64>| {
            let v = x.data().iter().map(|a| a.max(0.0)).sum();
            Ok((v, x.map(|a| if a > 0.0 { 1.0 } else { 0.0 })))
        };
        let r = finite_diff_check(relu_sum, &p, 1e-6).unwrap();
        assert_eq!(r.flagged, vec![0]);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn non_finite_is_a_numeric_error() {
        let p = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let r = finite_diff_check(|x| Ok((1.0 / x.data()[0], x.clone())), &p, 1e-6);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
