//! Binary random field models of periodic voxel lattices.
//!
//! The pipeline learns a non-homogeneous level-cut Gaussian model from a
//! segmented volume ([`identify`]), samples statistically equivalent volumes
//! with a Kronecker-factored Cholesky sampler ([`generate`]), evaluates scalar
//! quantities of interest on them ([`qoi`]) and estimates mean and central
//! moments of those quantities with multilevel Monte Carlo ([`mlmc`]).
//!
//! Volumes are stored x-fastest: voxel `(i, j, k)` of a grid with dims
//! `(nx, ny, nz)` lives at `i + nx * (j + ny * k)`.

pub mod config;
pub mod error;
pub mod field;
pub mod generate;
pub mod identify;
pub mod mlmc;
pub mod numerics;
pub mod qoi;
pub mod voxelgrid;

pub use error::{Error, Result};
pub use field::{Axis, Dims, Field3};
pub use numerics::{KernelParams, Smoothness};
pub use voxelgrid::{UnitCellLayout, VoxelGrid};
