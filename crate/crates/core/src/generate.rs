//! Sampling binary volumes from a fitted model.
//!
//! The Gaussian field is drawn through the separable Cholesky factor
//! `L = L_z (x) L_y (x) L_x`, applied as three mode products so the dense
//! Kronecker factor is never formed, then cut against the tiled thresholds.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Axis, Dims, Field3};
use crate::identify::ThresholdField;
use crate::numerics::{matern_rho, KernelParams, Smoothness};
use crate::voxelgrid::{tile_to_global, UnitCellLayout, VoxelGrid};

/// Diagonal shifts tried in turn when plain Cholesky fails.
pub const NUGGETS: [f64; 4] = [1e-12, 1e-10, 1e-8, 1e-6];

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged matrix rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `A A^T`.
    pub fn mul_transpose_self(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in 0..self.rows {
                out.data[i * self.rows + j] = self
                    .row(i)
                    .iter()
                    .zip(self.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn is_lower_triangular(&self) -> bool {
        (0..self.rows).all(|i| ((i + 1)..self.cols).all(|j| self.get(i, j) == 0.0))
    }
}

/// Toeplitz correlation matrix `[rho(|i - j|)]` of a line of `n` voxels.
pub fn build_corr_matrix_1d(n: usize, length: f64, nu: Smoothness) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::InvalidParameter(
            "matrix size must be positive".into(),
        ));
    }
    let lags: Vec<f64> = (0..n)
        .map(|d| matern_rho(d as f64, length, nu))
        .collect::<Result<_>>()?;
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m.data[i * n + j] = lags[i.abs_diff(j)];
        }
    }
    Ok(m)
}

fn try_cholesky(a: &Matrix, shift: f64) -> Option<Matrix> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    let scale = (0..n)
        .map(|i| a.get(i, i).abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    // Pivots at rounding level mean the matrix is numerically singular.
    let floor = n as f64 * f64::EPSILON * scale;
    for j in 0..n {
        let lj = &l.data[j * n..j * n + j];
        let pivot = a.get(j, j) + shift - lj.iter().map(|v| v * v).sum::<f64>();
        if !(pivot > floor) {
            return None;
        }
        let djj = pivot.sqrt();
        l.data[j * n + j] = djj;
        for i in (j + 1)..n {
            let s: f64 = (0..j).map(|k| l.data[i * n + k] * l.data[j * n + k]).sum();
            l.data[i * n + j] = (a.get(i, j) - s) / djj;
        }
    }
    Some(l)
}

/// Lower Cholesky factor, escalating through [`NUGGETS`] if needed.
/// Returns the factor and the shift that was applied (0 for none).
pub fn cholesky_with_nugget(a: &Matrix) -> Result<(Matrix, f64)> {
    if a.rows != a.cols || a.rows == 0 {
        return Err(Error::Shape(format!(
            "{}x{} matrix is not square",
            a.rows, a.cols
        )));
    }
    let n = a.rows;
    for i in 0..n {
        for j in 0..i {
            if (a.get(i, j) - a.get(j, i)).abs() > 1e-12 {
                return Err(Error::InvalidParameter("matrix is not symmetric".into()));
            }
        }
    }
    std::iter::once(0.0)
        .chain(NUGGETS)
        .find_map(|d| try_cholesky(a, d).map(|l| (l, d)))
        .ok_or(Error::NotPositiveDefinite {
            nugget: NUGGETS[NUGGETS.len() - 1],
        })
}

/// Mode-`mode` product (1 = x, 2 = y, 3 = z): contracts the columns of `a`
/// with that index of `b`.
pub fn mode_n_multiply(a: &Matrix, b: &Field3, mode: usize) -> Result<Field3> {
    let axis = match mode {
        1 => Axis::X,
        2 => Axis::Y,
        3 => Axis::Z,
        _ => return Err(Error::InvalidParameter(format!("mode {mode} not in 1..=3"))),
    };
    if a.cols != b.dims().extent(axis) {
        return Err(Error::Shape(format!(
            "matrix has {} columns, array extent along mode {mode} is {}",
            a.cols,
            b.dims().extent(axis)
        )));
    }
    Ok(apply_mode(a, b, axis, false))
}

fn apply_mode(a: &Matrix, b: &Field3, axis: Axis, lower: bool) -> Field3 {
    let [nx, ny, nz] = b.dims().0;
    let mut out_dims = b.dims();
    out_dims.0[axis.index()] = a.rows;
    let [ox, oy, _] = out_dims.0;
    let src = b.as_slice();
    let mut out = Field3::zeros(out_dims);
    // Each output value has a fixed summation order, so threads cannot change results.
    let upto = |r: usize| if lower { (r + 1).min(a.cols) } else { a.cols };
    match axis {
        Axis::X => {
            out.as_mut_slice()
                .par_chunks_mut(ox)
                .zip(src.par_chunks(nx))
                .for_each(|(o, s)| {
                    for (r, v) in o.iter_mut().enumerate() {
                        *v = a.row(r)[..upto(r)].iter().zip(s).map(|(p, q)| p * q).sum();
                    }
                });
        }
        Axis::Y => {
            out.as_mut_slice()
                .par_chunks_mut(ox * oy)
                .zip(src.par_chunks(nx * ny))
                .for_each(|(o, s)| {
                    for r in 0..a.rows {
                        let orow = &mut o[r * nx..(r + 1) * nx];
                        for (m, &c) in a.row(r)[..upto(r)].iter().enumerate() {
                            if c != 0.0 {
                                for (ov, sv) in orow.iter_mut().zip(&s[m * nx..(m + 1) * nx]) {
                                    *ov += c * sv;
                                }
                            }
                        }
                    }
                });
        }
        Axis::Z => {
            let plane = nx * ny;
            out.as_mut_slice()
                .par_chunks_mut(plane)
                .enumerate()
                .for_each(|(r, o)| {
                    for (m, &c) in a.row(r)[..upto(r)].iter().enumerate() {
                        if c != 0.0 {
                            for (ov, sv) in o.iter_mut().zip(&src[m * plane..(m + 1) * plane]) {
                                *ov += c * sv;
                            }
                        }
                    }
                });
            debug_assert_eq!(nz, a.cols);
        }
    }
    out
}

/// Per-axis Cholesky factors and the seed of the normal stream.
#[derive(Debug, Clone)]
pub struct CholeskySampler {
    factors: [Matrix; 3],
    nuggets: [f64; 3],
    dims: Dims,
    base_seed: u64,
}

impl CholeskySampler {
    pub fn new(params: &KernelParams, dims: Dims, base_seed: u64) -> Result<Self> {
        params.validate()?;
        dims.validate()?;
        let mut factors = Vec::with_capacity(3);
        let mut nuggets = [0.0; 3];
        for axis in Axis::ALL {
            let (l, nu) = params.axis(axis);
            let r = build_corr_matrix_1d(dims.extent(axis), l, nu)?;
            let (f, d) = cholesky_with_nugget(&r)?;
            nuggets[axis.index()] = d;
            factors.push(f);
        }
        let factors: [Matrix; 3] = factors.try_into().expect("three axes");
        Ok(CholeskySampler {
            factors,
            nuggets,
            dims,
            base_seed,
        })
    }

    /// Builds a sampler from explicit lower-triangular factors `[L_x, L_y, L_z]`.
    pub fn from_factors(factors: [Matrix; 3], base_seed: u64) -> Result<Self> {
        let mut dims = [0; 3];
        for (k, f) in factors.iter().enumerate() {
            if f.rows != f.cols || f.rows == 0 || !f.is_lower_triangular() {
                return Err(Error::Shape(format!(
                    "factor {k} is not square lower-triangular"
                )));
            }
            if (0..f.rows).any(|i| !(f.get(i, i) > 0.0)) {
                return Err(Error::InvalidParameter(format!(
                    "factor {k} has a non-positive diagonal"
                )));
            }
            dims[k] = f.rows;
        }
        Ok(CholeskySampler {
            factors,
            nuggets: [0.0; 3],
            dims: Dims(dims),
            base_seed,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn factors(&self) -> &[Matrix; 3] {
        &self.factors
    }

    /// Nugget applied per axis.
    pub fn nuggets(&self) -> [f64; 3] {
        self.nuggets
    }

    pub fn max_nugget(&self) -> f64 {
        self.nuggets.iter().copied().fold(0.0, f64::max)
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    /// Standard normals for `index`, x-fastest. Each index owns its own
    /// ChaCha stream, so draws do not depend on generation order.
    pub fn white_noise(&self, index: u64) -> Field3 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed);
        rng.set_stream(index);
        let data: Vec<f64> = (0..self.dims.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Field3::from_vec(self.dims, data).expect("length matches dims")
    }

    /// Correlated field `L_z x3 [L_y x2 (L_x x1 Z)]`.
    pub fn colour(&self, z: &Field3) -> Result<Field3> {
        if z.dims() != self.dims {
            return Err(Error::Shape(format!(
                "noise dims {} differ from sampler dims {}",
                z.dims(),
                self.dims
            )));
        }
        let u = apply_mode(&self.factors[0], z, Axis::X, true);
        let u = apply_mode(&self.factors[1], &u, Axis::Y, true);
        Ok(apply_mode(&self.factors[2], &u, Axis::Z, true))
    }

    pub fn sample_gaussian_field(&self, index: u64) -> Field3 {
        self.colour(&self.white_noise(index))
            .expect("noise has sampler dims")
    }
}

/// Level cut: 1 where `u >= d`, else 0.
pub fn clip_to_binary(u: &Field3, d: &Field3) -> Result<VoxelGrid> {
    if u.dims() != d.dims() {
        return Err(Error::Shape(format!(
            "field dims {} differ from threshold dims {}",
            u.dims(),
            d.dims()
        )));
    }
    let data = u
        .as_slice()
        .iter()
        .zip(d.as_slice())
        .map(|(&a, &t)| u8::from(a >= t))
        .collect();
    VoxelGrid::new(u.dims(), [1.0; 3], data)
}

/// Sampler plus tiled thresholds for one specimen geometry.
#[derive(Debug, Clone)]
pub struct Generator {
    sampler: CholeskySampler,
    thresholds: Field3,
}

impl Generator {
    pub fn new(
        params: &KernelParams,
        threshold: &ThresholdField,
        layout: &UnitCellLayout,
        base_seed: u64,
    ) -> Result<Self> {
        if threshold.dims() != layout.cell_dims() {
            return Err(Error::Shape(format!(
                "threshold dims {} differ from cell dims {}",
                threshold.dims(),
                layout.cell_dims()
            )));
        }
        let thresholds = tile_to_global(&threshold.to_field(), layout)?;
        let sampler = CholeskySampler::new(params, layout.grid_dims(), base_seed)?;
        Ok(Generator {
            sampler,
            thresholds,
        })
    }

    pub fn sampler(&self) -> &CholeskySampler {
        &self.sampler
    }

    pub fn thresholds(&self) -> &Field3 {
        &self.thresholds
    }

    pub fn realize(&self, index: u64) -> VoxelGrid {
        let u = self.sampler.sample_gaussian_field(index);
        clip_to_binary(&u, &self.thresholds).expect("sampler and thresholds share dims")
    }

    pub fn manifest_row(&self, index: u64, grid: &VoxelGrid) -> ManifestRow {
        ManifestRow {
            index,
            seed: self.sampler.base_seed,
            nugget: self.sampler.max_nugget(),
            porosity: grid.porosity(),
        }
    }
}

/// One-shot build, sample and cut.
pub fn generate_realization(
    params: &KernelParams,
    threshold: &ThresholdField,
    layout: &UnitCellLayout,
    seed: u64,
    index: u64,
) -> Result<VoxelGrid> {
    Ok(Generator::new(params, threshold, layout, seed)?.realize(index))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: u64,
    pub seed: u64,
    pub nugget: f64,
    pub porosity: f64,
}

pub fn write_manifest<W: Write>(rows: &[ManifestRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn read_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    Ok(rd.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_field(dims: Dims, seed: u64) -> Field3 {
        let mut s = seed;
        let data = (0..dims.len())
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        Field3::from_vec(dims, data).unwrap()
    }

    #[test]
    fn corr_matrix_examples() {
        let m = build_corr_matrix_1d(1, 3.0, Smoothness::Matern(0.5)).unwrap();
        assert_eq!(m, Matrix::identity(1));
        let m = build_corr_matrix_1d(5, 1.0, Smoothness::Matern(0.5)).unwrap();
        for i in 0..5usize {
            for j in 0..5 {
                let want = (-(i.abs_diff(j) as f64)).exp();
                assert!((m.get(i, j) - want).abs() < 1e-12);
            }
        }
        let m = build_corr_matrix_1d(2, 2.0, Smoothness::GaussianLimit).unwrap();
        let r = (-1.0f64 / 8.0).exp();
        assert!((m.get(0, 1) - r).abs() < 1e-15 && m.get(1, 0) == m.get(0, 1));
        assert!(build_corr_matrix_1d(0, 1.0, Smoothness::Matern(1.0)).is_err());
        assert!(build_corr_matrix_1d(3, -1.0, Smoothness::Matern(1.0)).is_err());
    }

    #[test]
    fn cholesky_examples() {
        let (l, d) = cholesky_with_nugget(&Matrix::identity(4)).unwrap();
        assert_eq!((l, d), (Matrix::identity(4), 0.0));
        let a = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let (l, d) = cholesky_with_nugget(&a).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(l.get(0, 0), 1.0);
        assert_eq!(l.get(0, 1), 0.0);
        assert_eq!(l.get(1, 0), 0.5);
        assert!((l.get(1, 1) - 0.75f64.sqrt()).abs() < 1e-15);
        let bad = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            cholesky_with_nugget(&bad),
            Err(Error::NotPositiveDefinite { .. })
        ));
        let asym = Matrix::from_rows(&[vec![1.0, 0.2], vec![0.1, 1.0]]).unwrap();
        assert!(cholesky_with_nugget(&asym).is_err());
    }

    #[test]
    fn long_rough_kernel_factorizes() {
        let r = build_corr_matrix_1d(368, 4187.0, Smoothness::Matern(0.104)).unwrap();
        let (l, d) = cholesky_with_nugget(&r).unwrap();
        let mut aug = r.clone();
        for i in 0..368 {
            aug.data[i * 368 + i] += d;
        }
        assert!(l.mul_transpose_self().max_abs_diff(&aug) < 1e-10);
    }

    #[test]
    fn smooth_long_kernel_needs_nugget() {
        let r = build_corr_matrix_1d(60, 200.0, Smoothness::GaussianLimit).unwrap();
        let (l, d) = cholesky_with_nugget(&r).unwrap();
        assert!(d > 0.0);
        let mut aug = r.clone();
        for i in 0..60 {
            aug.data[i * 60 + i] += d;
        }
        assert!(l.mul_transpose_self().max_abs_diff(&aug) < 1e-10);
    }

    #[test]
    fn mode_products() {
        let b = lcg_field(Dims::new(3, 4, 5), 1);
        for mode in 1..=3 {
            let n = b.dims().0[mode - 1];
            assert_eq!(mode_n_multiply(&Matrix::identity(n), &b, mode).unwrap(), b);
        }
        let swap = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let b2 = Field3::from_vec(Dims::new(2, 1, 1), vec![7.0, -2.0]).unwrap();
        assert_eq!(
            mode_n_multiply(&swap, &b2, 1).unwrap().as_slice(),
            &[-2.0, 7.0]
        );
        assert!(mode_n_multiply(&swap, &b, 1).is_err());
        assert!(mode_n_multiply(&swap, &b2, 4).is_err());

        // Rectangular: 2x4 along y changes the extent.
        let a = Matrix::from_rows(&[vec![1.0, 0.0, 2.0, 0.0], vec![0.0, 1.0, 0.0, -1.0]]).unwrap();
        let c = mode_n_multiply(&a, &b, 2).unwrap();
        assert_eq!(c.dims(), Dims::new(3, 2, 5));
        for i in 0..3 {
            for k in 0..5 {
                assert_eq!(c.get(i, 0, k), b.get(i, 0, k) + 2.0 * b.get(i, 2, k));
                assert_eq!(c.get(i, 1, k), b.get(i, 1, k) - b.get(i, 3, k));
            }
        }
    }

    #[test]
    fn sampler_determinism_and_identity() {
        let dims = Dims::new(3, 2, 2);
        let ident = [
            Matrix::identity(3),
            Matrix::identity(2),
            Matrix::identity(2),
        ];
        let s = CholeskySampler::from_factors(ident, 42).unwrap();
        assert_eq!(s.sample_gaussian_field(5), s.white_noise(5));
        assert_eq!(s.sample_gaussian_field(5), s.sample_gaussian_field(5));
        assert_ne!(s.sample_gaussian_field(5), s.sample_gaussian_field(6));
        assert_eq!(s.dims(), dims);

        let one = CholeskySampler::new(
            &KernelParams::isotropic_matern(2.0, 1.0).unwrap(),
            Dims::new(1, 1, 1),
            7,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        rng.set_stream(3);
        let z: f64 = StandardNormal.sample(&mut rng);
        assert_eq!(one.sample_gaussian_field(3).as_slice(), &[z]);
    }

    #[test]
    fn from_factors_rejects_bad_input() {
        let upper = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let id = Matrix::identity(1);
        assert!(CholeskySampler::from_factors([upper, id.clone(), id.clone()], 0).is_err());
        let zero_diag = Matrix::from_rows(&[vec![0.0]]).unwrap();
        assert!(CholeskySampler::from_factors([zero_diag, id.clone(), id], 0).is_err());
    }

    #[test]
    fn clip_rules() {
        let dims = Dims::new(4, 1, 1);
        let u = Field3::from_vec(dims, vec![0.3, 0.1, -5.0, 100.0]).unwrap();
        let d = Field3::from_vec(dims, vec![0.1, 0.1, f64::NEG_INFINITY, f64::INFINITY]).unwrap();
        assert_eq!(clip_to_binary(&u, &d).unwrap().as_bytes(), &[1, 1, 1, 0]);
        assert!(clip_to_binary(&u, &Field3::zeros(Dims::new(2, 2, 1))).is_err());
    }

    #[test]
    fn realization_examples() {
        let cell = Dims::new(4, 3, 1);
        let layout = UnitCellLayout::new(cell, Dims::new(8, 6, 1)).unwrap();
        let params = KernelParams::isotropic_matern(3.0, 0.5).unwrap();
        let all = ThresholdField::constant(cell, f64::NEG_INFINITY).unwrap();
        let g = generate_realization(&params, &all, &layout, 1, 0).unwrap();
        assert!(g.as_bytes().iter().all(|&b| b == 1));

        let t = ThresholdField::new(cell, (0..12).map(|i| i as f64 * 0.1 - 0.6).collect()).unwrap();
        let a = generate_realization(&params, &t, &layout, 9, 4).unwrap();
        let b = generate_realization(&params, &t, &layout, 9, 4).unwrap();
        assert_eq!(a, b);
        let c = generate_realization(&params, &t, &layout, 9, 5).unwrap();
        assert_ne!(a, c);
        let wrong = ThresholdField::constant(Dims::new(2, 2, 1), 0.0).unwrap();
        assert!(Generator::new(&params, &wrong, &layout, 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let rows = vec![
            ManifestRow {
                index: 0,
                seed: 11,
                nugget: 0.0,
                porosity: 0.25,
            },
            ManifestRow {
                index: 1,
                seed: 11,
                nugget: 1e-10,
                porosity: 0.5,
            },
        ];
        let mut buf = Vec::new();
        write_manifest(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("index,seed,nugget,porosity\n"));
        assert_eq!(read_manifest(&text).unwrap(), rows);
    }
}
