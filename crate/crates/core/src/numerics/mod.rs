//! Deterministic scalar primitives: error function, kurtosis, central
//! differences, and a small symmetric eigensolver.

mod eigen;
mod erf;

pub use eigen::{eigenvalues_sym, min_eig_sym, singular_values, MAX_EIG_DIM};
pub use erf::erf;

use crate::precision::{re, Real};
use thiserror::Error;

/// Sample variance below this is treated as degenerate for kurtosis.
pub const VAR_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NumericsError {
    #[error("sample variance below {VAR_EPS:e}; kurtosis undefined")]
    DegenerateVariance,
    #[error("matrix is not symmetric within 1e-10")]
    NotSymmetric,
}

/// Standard normal CDF via `erf`.
#[inline]
pub fn gauss_cdf(z: f64) -> f64 {
    0.5 + 0.5 * erf(z / std::f64::consts::SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn gauss_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Pearson kurtosis with population (1/n) moments:
/// `E[(v - mean)^4] / var^2`.
pub fn pearson_kurtosis<T: Real>(v: &[T]) -> Result<T, NumericsError> {
    assert!(v.len() >= 2, "kurtosis needs at least two samples");
    let n = re::<T>(v.len() as f64);
    let mean = v.iter().fold(T::zero(), |s, &x| s + x) / n;
    let mut m2 = T::zero();
    let mut m4 = T::zero();
    for &x in v {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    let var = m2 / n;
    if var.to_f64_() <= VAR_EPS {
        return Err(NumericsError::DegenerateVariance);
    }
    Ok(m4 / n / (var * var))
}

/// Central-difference gradient of `f` at `x` with step `h`:
/// entry `i` is `(f(x + h e_i) - f(x - h e_i)) / (2h)`.
///
/// `f` must be deterministic: any internal noise has to be frozen across the
/// `2 n` evaluations for the estimate to mean anything.
pub fn central_diff_grad<T: Real>(
    f: &mut dyn FnMut(&[T]) -> T,
    x: &[T],
    h: T,
) -> Vec<T> {
    assert!(h > T::zero(), "step must be positive");
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad.push((fp - fm) / (re::<T>(2.0) * h));
    }
    grad
}
