//! Independent dense computations checked against the fast paths.

mod common;

use common::{dense_cov, dense_modulus};
use nalgebra::{DMatrix, DVector};
use voxrf::generate::{build_corr_matrix_1d, CholeskySampler};
use voxrf::numerics::{binary_cov_model, std_normal_cdf};
use voxrf::qoi::{solve_homogenized_e_with, ElasticitySetup, SolverOptions};
use voxrf::{Axis, Dims, KernelParams, Smoothness, VoxelGrid};

#[test]
fn kronecker_sampler_matches_dense_cholesky() {
    let dims = Dims::new(5, 4, 3);
    let params = KernelParams::new(
        [2.5, 1.5, 3.0],
        [
            Smoothness::Matern(0.8),
            Smoothness::Matern(2.5),
            Smoothness::GaussianLimit,
        ],
    )
    .unwrap();
    let sampler = CholeskySampler::new(&params, dims, 42).unwrap();
    // The Gaussian-limit axis may need a nugget; mirror it in the dense oracle
    // through the Kronecker product of the regularized 1D matrices.
    let nug = sampler.nuggets();
    let mut big = DMatrix::<f64>::identity(1, 1);
    for a in (0..3).rev() {
        let (l, nu) = params.axis(Axis::ALL[a]);
        let m = build_corr_matrix_1d(dims.0[a], l, nu).unwrap();
        let n = m.rows();
        let mut d = DMatrix::from_fn(n, n, |i, j| m.get(i, j));
        for i in 0..n {
            d[(i, i)] += nug[a];
        }
        big = big.kronecker(&d);
    }
    if nug == [0.0; 3] {
        assert!((&big - dense_cov(dims, &params)).abs().max() < 1e-14);
    }
    let chol = big.clone().cholesky().expect("dense SPD").l();
    for index in [0u64, 7, 123] {
        let z = sampler.white_noise(index);
        let zv = DVector::from_column_slice(z.as_slice());
        let want = &chol * zv;
        let got = sampler.colour(&z).unwrap();
        let diff = got
            .as_slice()
            .iter()
            .zip(want.iter())
            .map(|(g, w)| (g - w).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-8, "index {index}: max diff {diff:e}");
        assert_eq!(
            sampler.sample_gaussian_field(index).as_slice(),
            got.as_slice()
        );
    }
}

/// Bivariate upper orthant probability by composite Simpson on the
/// conditional form, independent of the library's arcsine-type integral.
fn bvn_upper(d1: f64, d2: f64, rho: f64) -> f64 {
    // P(U1 >= d1, U2 >= d2) = int_{d1}^inf phi(x) (1 - Phi((d2 - rho x)/s)) dx
    let s = (1.0 - rho * rho).sqrt();
    let (lo, hi) = (d1, 9.0_f64.max(d1 + 1.0));
    let n = 4000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
            * (1.0 - std_normal_cdf((d2 - rho * x) / s))
    };
    // Composite Simpson.
    let mut acc = f(lo) + f(hi);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + k as f64 * h);
    }
    acc * h / 3.0
}

#[test]
fn binary_covariance_matches_direct_integration() {
    for &(d1, d2) in &[
        (0.0, 0.0),
        (0.5, -0.3),
        (-1.2, 0.8),
        (1.5, 1.5),
        (-0.2, 2.0),
    ] {
        for &rho in &[0.0, 0.1, 0.25, 0.6, 0.95, 0.999] {
            let want =
                bvn_upper(d1, d2, rho) - (1.0 - std_normal_cdf(d1)) * (1.0 - std_normal_cdf(d2));
            let got = binary_cov_model(d1, d2, rho).unwrap();
            assert!(
                (got - want).abs() < 1e-9,
                "d=({d1},{d2}) rho={rho}: {got} vs {want}"
            );
        }
        // Fully correlated: P(U >= max(d1, d2)) minus the product of marginals.
        let limit = std_normal_cdf(d1.min(d2)) - std_normal_cdf(d1) * std_normal_cdf(d2);
        assert!((binary_cov_model(d1, d2, 1.0).unwrap() - limit).abs() < 1e-12);
    }
    assert!(binary_cov_model(0.0, 0.0, -0.1).is_err());
}

#[test]
fn matrix_free_solver_matches_dense_lu() {
    let grid = VoxelGrid::from_fn(Dims::new(4, 4, 4), |i, j, k| {
        (i + 2 * j + 3 * k) % 5 != 0 || i == 1
    })
    .with_spacing([1.0, 0.5, 2.0])
    .unwrap();
    let opts = SolverOptions {
        rel_tol: 1e-13,
        ..SolverOptions::default()
    };
    for axis in Axis::ALL {
        let setup = ElasticitySetup::new(70.0, axis).unwrap();
        let want = dense_modulus(&grid, &setup);
        let got = solve_homogenized_e_with(&grid, &setup, &opts)
            .unwrap()
            .modulus;
        let rel = ((got - want) / want).abs();
        assert!(
            rel < 1e-8,
            "axis {}: {got} vs {want} (rel {rel:e})",
            axis.name()
        );
    }
}
