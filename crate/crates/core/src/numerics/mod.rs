//! Special functions and quadrature behind the model formulas.

mod bessel;
mod bincov;
mod kernel;
mod normal;
pub mod quadrature;

pub use bessel::{bessel_k, bessel_k_scaled, ln_bessel_k};
pub use bincov::binary_cov_model;
pub(crate) use bincov::binary_cov_unchecked;
pub(crate) use kernel::matern_unchecked;
pub use kernel::{matern_rho, separable_rho, KernelParams, Smoothness};
pub use normal::{std_normal_cdf, std_normal_inv_cdf, std_normal_pdf};
