use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

pub fn std_normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF. `NaN` propagates; callers validate inputs.
pub fn std_normal_cdf(u: f64) -> f64 {
    if u == f64::INFINITY {
        return 1.0;
    }
    if u == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * libm::erfc(-u * FRAC_1_SQRT_2)
}

// Rational approximation of the lower tail (relative error ~1e-9), refined below.
const A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.383577518672690e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const B: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const C: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549732539343734e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const D: [f64; 4] = [
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e+00,
    3.754408661907416e+00,
];

fn initial_guess(p: f64) -> f64 {
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Standard normal quantile, with `p = 0` and `p = 1` mapped to -inf and +inf.
pub fn std_normal_inv_cdf(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "probability {p} outside [0, 1]"
        )));
    }
    if p == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if p == 1.0 {
        return Ok(f64::INFINITY);
    }
    // Work in the lower half so the residual Phi(x) - p keeps relative precision.
    if p > 0.5 {
        return Ok(-lower_quantile(1.0 - p));
    }
    Ok(lower_quantile(p))
}

fn lower_quantile(p: f64) -> f64 {
    let mut x = initial_guess(p);
    // Halley steps on Phi(x) - p.
    for _ in 0..3 {
        let e = std_normal_cdf(x) - p;
        let u = e / std_normal_pdf(x);
        let step = u / (1.0 + 0.5 * x * u);
        x -= step;
        if step.abs() <= 1e-16 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_values() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert_eq!(std_normal_cdf(f64::INFINITY), 1.0);
        assert_eq!(std_normal_cdf(f64::NEG_INFINITY), 0.0);
        assert!((std_normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        // reference values to 17 digits
        assert!((std_normal_cdf(-1.0) - 0.15865525393145705).abs() < 1e-15);
        assert!((std_normal_cdf(2.5) - 0.99379033467422386).abs() < 1e-15);
        assert!((std_normal_cdf(-8.0) - 6.2209605742717841e-16).abs() < 1e-28);
    }

    #[test]
    fn quantile_values() {
        assert_eq!(std_normal_inv_cdf(0.5).unwrap(), 0.0);
        assert!((std_normal_inv_cdf(0.025).unwrap() + 1.95996).abs() < 1e-4);
        assert_eq!(std_normal_inv_cdf(1.0).unwrap(), f64::INFINITY);
        assert_eq!(std_normal_inv_cdf(0.0).unwrap(), f64::NEG_INFINITY);
        assert!(std_normal_inv_cdf(1.5).is_err());
        assert!(std_normal_inv_cdf(-1e-3).is_err());
        assert!(std_normal_inv_cdf(f64::NAN).is_err());
    }

    #[test]
    fn quantile_inverts_cdf() {
        let mut p = 1e-15;
        while p < 1.0 - 1e-15 {
            let x = std_normal_inv_cdf(p).unwrap();
            assert!((std_normal_cdf(x) - p).abs() <= 1e-12, "p = {p}");
            p = if p < 0.5 {
                p * 1.7
            } else {
                1.0 - (1.0 - p) / 1.7
            };
        }
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let x = std_normal_inv_cdf(p).unwrap();
            assert!((std_normal_cdf(x) - p).abs() <= 1e-15, "p = {p}");
        }
    }
}
