//! Dense reference computations shared by the test targets.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use voxrf::numerics::separable_rho;
use voxrf::qoi::{element_stiffness, ElasticitySetup};
use voxrf::{Dims, KernelParams, VoxelGrid};

/// Full separable covariance of a grid, x-fastest ordering.
pub fn dense_cov(dims: Dims, params: &KernelParams) -> DMatrix<f64> {
    let n = dims.len();
    DMatrix::from_fn(n, n, |p, q| {
        let (a, b) = (dims.coords(p), dims.coords(q));
        let lags = std::array::from_fn(|i| (a[i] as f64 - b[i] as f64).abs());
        separable_rho(lags, params).unwrap()
    })
}

/// Dense assembly of the homogenization tension test, solved by LU.
pub fn dense_modulus(grid: &VoxelGrid, setup: &ElasticitySetup) -> f64 {
    let dims = grid.dims().0;
    let h = grid.spacing();
    let nn = [dims[0] + 1, dims[1] + 1, dims[2] + 1];
    let node = |i: usize, j: usize, k: usize| i + nn[0] * (j + nn[1] * k);
    let ndof = 3 * nn[0] * nn[1] * nn[2];
    let ke = element_stiffness(h, setup.poisson);
    let mut k = DMatrix::<f64>::zeros(ndof, ndof);
    for ez in 0..dims[2] {
        for ey in 0..dims[1] {
            for ex in 0..dims[0] {
                let e = if grid.get(ex, ey, ez) == 1 {
                    setup.e_material
                } else {
                    setup.e_material * setup.void_factor
                };
                let loc: Vec<usize> = (0..8)
                    .map(|m| node(ex + (m & 1), ey + ((m >> 1) & 1), ez + (m >> 2)))
                    .collect();
                for p in 0..24 {
                    for q in 0..24 {
                        k[(3 * loc[p / 3] + p % 3, 3 * loc[q / 3] + q % 3)] += e * ke[p * 24 + q];
                    }
                }
            }
        }
    }
    let a = setup.load_axis.index();
    let (b, c) = ((a + 1) % 3, (a + 2) % 3);
    let length = dims[a] as f64 * h[a];
    let mut fixed = vec![None; ndof];
    for kk in 0..nn[2] {
        for j in 0..nn[1] {
            for i in 0..nn[0] {
                let p = [i, j, kk];
                let n = node(i, j, kk);
                if p[a] == 0 {
                    fixed[3 * n + a] = Some(0.0);
                } else if p[a] == dims[a] {
                    fixed[3 * n + a] = Some(setup.applied_strain * length);
                }
            }
        }
    }
    fixed[b] = Some(0.0);
    fixed[c] = Some(0.0);
    let mut corner = [0; 3];
    corner[b] = dims[b];
    fixed[3 * node(corner[0], corner[1], corner[2]) + c] = Some(0.0);

    let free: Vec<usize> = (0..ndof).filter(|&d| fixed[d].is_none()).collect();
    let mut ug = DVector::<f64>::zeros(ndof);
    for d in 0..ndof {
        if let Some(v) = fixed[d] {
            ug[d] = v;
        }
    }
    let rhs = -(&k * &ug);
    let kff = DMatrix::from_fn(free.len(), free.len(), |p, q| k[(free[p], free[q])]);
    let rf = DVector::from_iterator(free.len(), free.iter().map(|&d| rhs[d]));
    let uf = kff.lu().solve(&rf).expect("nonsingular");
    for (p, &d) in free.iter().enumerate() {
        ug[d] = uf[p];
    }
    let f = &k * &ug;
    let mut force = 0.0;
    for kk in 0..nn[2] {
        for j in 0..nn[1] {
            for i in 0..nn[0] {
                if [i, j, kk][a] == dims[a] {
                    force += f[3 * node(i, j, kk) + a];
                }
            }
        }
    }
    let area = dims[b] as f64 * h[b] * dims[c] as f64 * h[c];
    force / area / setup.applied_strain
}
