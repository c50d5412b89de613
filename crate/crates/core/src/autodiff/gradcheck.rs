//! Central finite differences, used as the reference for every derivative rule.

use super::{Real, Tensor};

/// Per-coordinate estimate `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)`.
pub fn finite_difference<T: Real, F>(mut f: F, x: &Tensor<T>, eps: T) -> Tensor<T>
where
    F: FnMut(&Tensor<T>) -> T,
{
    assert!(eps > T::zero(), "finite difference step must be positive");
    let base = x.data().to_vec();
    let two_eps = eps + eps;
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut probe = base.clone();
        probe[i] = base[i] + eps;
        let plus = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()));
        probe[i] = base[i] - eps;
        let minus = f(&Tensor::from_parts(x.shape().to_vec(), probe));
        out.push((plus - minus) / two_eps);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn max_relative_error<T: Real>(analytic: &[T], numeric: &[T]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a.as_f64(), n.as_f64()))
        .fold(0.0, f64::max)
}
