//! Matérn correlation and its separable 3D product.

use serde::{Deserialize, Serialize};

use super::bessel::ln_bessel_k;
use crate::error::{Error, Result};
use crate::field::Axis;

/// Matérn smoothness, or the squared-exponential limit reached as it grows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothness {
    Matern(f64),
    GaussianLimit,
}

impl Smoothness {
    pub fn value(&self) -> Option<f64> {
        match *self {
            Smoothness::Matern(nu) => Some(nu),
            Smoothness::GaussianLimit => None,
        }
    }
}

/// Per-axis correlation lengths (in voxels) and smoothness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lengths: [f64; 3],
    pub smoothness: [Smoothness; 3],
}

impl KernelParams {
    pub fn new(lengths: [f64; 3], smoothness: [Smoothness; 3]) -> Result<Self> {
        let p = KernelParams {
            lengths,
            smoothness,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn isotropic_matern(length: f64, nu: f64) -> Result<Self> {
        Self::new([length; 3], [Smoothness::Matern(nu); 3])
    }

    pub fn validate(&self) -> Result<()> {
        for axis in Axis::ALL {
            check_params(self.lengths[axis.index()], self.smoothness[axis.index()])?;
        }
        Ok(())
    }

    pub fn axis(&self, axis: Axis) -> (f64, Smoothness) {
        (self.lengths[axis.index()], self.smoothness[axis.index()])
    }
}

fn check_params(length: f64, nu: Smoothness) -> Result<()> {
    if !(length.is_finite() && length > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "correlation length {length} must be positive"
        )));
    }
    if let Smoothness::Matern(v) = nu {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "smoothness {v} must be positive"
            )));
        }
    }
    Ok(())
}

/// One-dimensional Matérn correlation at a nonnegative lag.
pub fn matern_rho(lag: f64, length: f64, nu: Smoothness) -> Result<f64> {
    check_params(length, nu)?;
    if !(lag >= 0.0) {
        return Err(Error::InvalidParameter(format!("lag {lag} must be >= 0")));
    }
    Ok(matern_unchecked(lag, length, nu))
}

pub(crate) fn matern_unchecked(lag: f64, length: f64, nu: Smoothness) -> f64 {
    if lag == 0.0 {
        return 1.0;
    }
    match nu {
        Smoothness::GaussianLimit => (-(lag * lag) / (2.0 * length * length)).exp(),
        Smoothness::Matern(nu) => {
            if lag.is_infinite() {
                return 0.0;
            }
            let x = (2.0 * nu).sqrt() * lag / length;
            let ln = (1.0 - nu) * std::f64::consts::LN_2 - libm::lgamma(nu)
                + nu * x.ln()
                + ln_bessel_k(nu, x);
            ln.exp().min(1.0)
        }
    }
}

/// Product of the three axis kernels at lag vector `(dx, dy, dz)`.
pub fn separable_rho(lags: [f64; 3], params: &KernelParams) -> Result<f64> {
    let mut rho = 1.0;
    for axis in Axis::ALL {
        let (l, nu) = params.axis(axis);
        rho *= matern_rho(lags[axis.index()], l, nu)?;
    }
    Ok(rho)
}
