//! Covariance of a level-cut binary field as a single-fold integral.

use std::f64::consts::PI;

use super::normal::std_normal_cdf;
use super::quadrature::integrate;
use crate::error::{Error, Result};

const ABS_TOL: f64 = 1e-12;

/// Covariance of `1{U1 >= d1}` and `1{U2 >= d2}` for standard normals with
/// correlation `rho`:
///
/// ```text
/// int_0^rho exp(-(d1^2 + d2^2 - 2 d1 d2 z) / (2 (1 - z^2))) / (2 pi sqrt(1 - z^2)) dz
/// ```
///
/// evaluated after substituting `z = sin(theta)`. Infinite thresholds give 0.
pub fn binary_cov_model(d1: f64, d2: f64, rho: f64) -> Result<f64> {
    if d1.is_nan() || d2.is_nan() {
        return Err(Error::InvalidParameter("NaN threshold".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidParameter(format!(
            "correlation {rho} outside [0, 1]"
        )));
    }
    Ok(binary_cov_unchecked(d1, d2, rho))
}

pub(crate) fn binary_cov_unchecked(d1: f64, d2: f64, rho: f64) -> f64 {
    if d1.is_infinite() || d2.is_infinite() || rho == 0.0 {
        return 0.0;
    }
    if rho >= 1.0 {
        return std_normal_cdf(d1.min(d2)) - std_normal_cdf(d1) * std_normal_cdf(d2);
    }
    let a = d1 * d1 + d2 * d2;
    let b = 2.0 * d1 * d2;
    let upper = rho.asin();
    let v = integrate(
        |theta| {
            let (s, c) = theta.sin_cos();
            (-(a - b * s) / (2.0 * c * c)).exp()
        },
        0.0,
        upper,
        ABS_TOL * 2.0 * PI,
    );
    v / (2.0 * PI)
}
