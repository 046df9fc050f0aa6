//! Trilinear hexahedral voxel elements and a matrix-free PCG solve of the
//! uniaxial tension test.
//!
//! Nodes are numbered x-fastest on the `(nx+1) x (ny+1) x (nz+1)` lattice with
//! three displacement DOFs each. Local element node `m` sits at corner offset
//! `(m & 1, (m >> 1) & 1, m >> 2)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Axis, Dims};
use crate::voxelgrid::VoxelGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElasticitySetup {
    pub e_material: f64,
    #[serde(default = "default_poisson")]
    pub poisson: f64,
    #[serde(default = "default_strain")]
    pub applied_strain: f64,
    #[serde(default = "default_axis")]
    pub load_axis: Axis,
    #[serde(default = "default_void_factor")]
    pub void_factor: f64,
}

fn default_poisson() -> f64 {
    0.3
}
fn default_strain() -> f64 {
    1e-3
}
fn default_axis() -> Axis {
    Axis::X
}
fn default_void_factor() -> f64 {
    1e-9
}

impl ElasticitySetup {
    pub fn new(e_material: f64, load_axis: Axis) -> Result<Self> {
        let s = ElasticitySetup {
            e_material,
            poisson: default_poisson(),
            applied_strain: default_strain(),
            load_axis,
            void_factor: default_void_factor(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e_material > 0.0 && self.e_material.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "material modulus {} must be positive",
                self.e_material
            )));
        }
        if !(self.poisson > 0.0 && self.poisson < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "Poisson ratio {} outside (0, 0.5)",
                self.poisson
            )));
        }
        if !(self.applied_strain != 0.0 && self.applied_strain.is_finite()) {
            return Err(Error::InvalidParameter(
                "applied strain must be nonzero".into(),
            ));
        }
        if !(self.void_factor > 0.0 && self.void_factor < 1e-2) {
            return Err(Error::InvalidParameter(format!(
                "void factor {} must lie in (0, 1e-2)",
                self.void_factor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub rel_tol: f64,
    /// Defaults to `max(2000, 2 * free DOFs)` when `None`.
    pub max_iter: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            rel_tol: 1e-8,
            max_iter: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticSolution {
    pub modulus: f64,
    pub iterations: usize,
    pub rel_residual: f64,
}

const GAUSS: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)

/// 24x24 stiffness of one `h[0] x h[1] x h[2]` element with unit Young's
/// modulus, row-major, DOF order `3 * node + component`.
pub fn element_stiffness(h: [f64; 3], poisson: f64) -> Vec<f64> {
    let nu = poisson;
    let lam = nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = 0.5 / (1.0 + nu);
    let mut d = [[0.0; 6]; 6];
    for i in 0..3 {
        for j in 0..3 {
            d[i][j] = lam;
        }
        d[i][i] = lam + 2.0 * mu;
        d[i + 3][i + 3] = mu;
    }
    let det_j = h[0] * h[1] * h[2] / 8.0;
    let mut ke = vec![0.0; 576];
    for gp in 0..8 {
        let q = [
            if gp & 1 == 0 { -GAUSS } else { GAUSS },
            if gp & 2 == 0 { -GAUSS } else { GAUSS },
            if gp & 4 == 0 { -GAUSS } else { GAUSS },
        ];
        let mut b = [[0.0; 24]; 6];
        for m in 0..8 {
            let s = [
                if m & 1 == 0 { -1.0 } else { 1.0 },
                if m & 2 == 0 { -1.0 } else { 1.0 },
                if m & 4 == 0 { -1.0 } else { 1.0 },
            ];
            let f = |a: usize| 1.0 + s[a] * q[a];
            let dx = 0.125 * s[0] * f(1) * f(2) * 2.0 / h[0];
            let dy = 0.125 * s[1] * f(0) * f(2) * 2.0 / h[1];
            let dz = 0.125 * s[2] * f(0) * f(1) * 2.0 / h[2];
            let c = 3 * m;
            b[0][c] = dx;
            b[1][c + 1] = dy;
            b[2][c + 2] = dz;
            b[3][c + 1] = dz;
            b[3][c + 2] = dy;
            b[4][c] = dz;
            b[4][c + 2] = dx;
            b[5][c] = dy;
            b[5][c + 1] = dx;
        }
        let mut db = [[0.0; 24]; 6];
        for r in 0..6 {
            for c in 0..24 {
                db[r][c] = (0..6).map(|k| d[r][k] * b[k][c]).sum();
            }
        }
        for i in 0..24 {
            for j in 0..24 {
                ke[i * 24 + j] += det_j * (0..6).map(|k| b[k][i] * db[k][j]).sum::<f64>();
            }
        }
    }
    ke
}

/// Voxel mesh with per-element moduli.
pub(crate) struct Mesh {
    dims: [usize; 3],
    nodes: [usize; 3],
    h: [f64; 3],
    ke: Vec<f64>,
    moduli: Vec<f64>,
}

impl Mesh {
    pub(crate) fn new(grid: &VoxelGrid, setup: &ElasticitySetup) -> Self {
        let dims = grid.dims().0;
        let moduli = grid
            .as_bytes()
            .iter()
            .map(|&v| {
                if v == 1 {
                    setup.e_material
                } else {
                    setup.void_factor * setup.e_material
                }
            })
            .collect();
        Mesh {
            dims,
            nodes: [dims[0] + 1, dims[1] + 1, dims[2] + 1],
            h: grid.spacing(),
            ke: element_stiffness(grid.spacing(), setup.poisson),
            moduli,
        }
    }

    pub(crate) fn n_nodes(&self) -> usize {
        self.nodes.iter().product()
    }

    fn node(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nodes[0] * (j + self.nodes[1] * k)
    }

    fn node_coords(&self, n: usize) -> [usize; 3] {
        let i = n % self.nodes[0];
        let r = n / self.nodes[0];
        [i, r % self.nodes[1], r / self.nodes[1]]
    }

    /// Elements touching node `n`, with the node's local index in each.
    fn adjacent(&self, n: usize) -> impl Iterator<Item = (usize, [usize; 3], usize)> + '_ {
        let c = self.node_coords(n);
        (0..8).filter_map(move |m| {
            let off = [m & 1, (m >> 1) & 1, m >> 2];
            let mut e = [0; 3];
            for a in 0..3 {
                if c[a] < off[a] || c[a] - off[a] >= self.dims[a] {
                    return None;
                }
                e[a] = c[a] - off[a];
            }
            let ei = e[0] + self.dims[0] * (e[1] + self.dims[1] * e[2]);
            Some((ei, e, m))
        })
    }

    /// `y = K u`, gathered per node so each output entry has one writer.
    pub(crate) fn apply(&self, u: &[f64], y: &mut [f64]) {
        y.par_chunks_mut(3).enumerate().for_each(|(n, out)| {
            let mut acc = [0.0; 3];
            for (ei, e, loc) in self.adjacent(n) {
                let em = self.moduli[ei];
                for m in 0..8 {
                    let nm = self.node(e[0] + (m & 1), e[1] + ((m >> 1) & 1), e[2] + (m >> 2));
                    let um = &u[3 * nm..3 * nm + 3];
                    for (d, a) in acc.iter_mut().enumerate() {
                        let row =
                            &self.ke[(3 * loc + d) * 24 + 3 * m..(3 * loc + d) * 24 + 3 * m + 3];
                        *a += em * (row[0] * um[0] + row[1] * um[1] + row[2] * um[2]);
                    }
                }
            }
            out.copy_from_slice(&acc);
        });
    }

    pub(crate) fn diagonal(&self) -> Vec<f64> {
        let mut diag = vec![0.0; 3 * self.n_nodes()];
        diag.par_chunks_mut(3).enumerate().for_each(|(n, out)| {
            for (ei, _, loc) in self.adjacent(n) {
                for (d, o) in out.iter_mut().enumerate() {
                    let r = 3 * loc + d;
                    *o += self.moduli[ei] * self.ke[r * 24 + r];
                }
            }
        });
        diag
    }
}

// Fixed-size chunks summed in order: deterministic regardless of thread count.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    const CHUNK: usize = 4096;
    let parts: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
        .collect();
    parts.iter().sum()
}

/// Dirichlet data for the tension test: `(fixed mask, prescribed values)`.
pub(crate) fn boundary_conditions(mesh: &Mesh, setup: &ElasticitySetup) -> (Vec<bool>, Vec<f64>) {
    let a = setup.load_axis.index();
    let (b, c) = ((a + 1) % 3, (a + 2) % 3);
    let ndof = 3 * mesh.n_nodes();
    let mut fixed = vec![false; ndof];
    let mut value = vec![0.0; ndof];
    let length = mesh.dims[a] as f64 * mesh.h[a];
    for n in 0..mesh.n_nodes() {
        let p = mesh.node_coords(n);
        if p[a] == 0 {
            fixed[3 * n + a] = true;
        } else if p[a] == mesh.dims[a] {
            fixed[3 * n + a] = true;
            value[3 * n + a] = setup.applied_strain * length;
        }
    }
    // Rigid-body modes left by the two faces: translations along b and c,
    // rotation about a.
    let origin = 0;
    fixed[3 * origin + b] = true;
    fixed[3 * origin + c] = true;
    let mut corner = [0; 3];
    corner[b] = mesh.dims[b];
    let far = mesh.node(corner[0], corner[1], corner[2]);
    fixed[3 * far + c] = true;
    (fixed, value)
}

/// Homogenized modulus along the load axis: mean normal stress on the
/// loaded face (from reaction forces) divided by the applied strain.
pub fn solve_homogenized_e(grid: &VoxelGrid, setup: &ElasticitySetup) -> Result<f64> {
    Ok(solve_homogenized_e_with(grid, setup, &SolverOptions::default())?.modulus)
}

pub fn solve_homogenized_e_with(
    grid: &VoxelGrid,
    setup: &ElasticitySetup,
    opts: &SolverOptions,
) -> Result<ElasticSolution> {
    setup.validate()?;
    if grid.is_empty() {
        return Err(Error::Empty("empty grid".into()));
    }
    let mesh = Mesh::new(grid, setup);
    let (fixed, prescribed) = boundary_conditions(&mesh, setup);
    let ndof = fixed.len();
    let a = setup.load_axis.index();

    // Reference residual: free-DOF load produced by the prescribed values alone.
    let mut kx = vec![0.0; ndof];
    mesh.apply(&prescribed, &mut kx);
    let ref_norm = kx
        .iter()
        .zip(&fixed)
        .filter(|(_, &f)| !f)
        .map(|(v, _)| v * v)
        .sum::<f64>()
        .sqrt();

    // Start from the homogeneous-material solution, exact for uniform grids.
    let eps = setup.applied_strain;
    let mut u: Vec<f64> = (0..ndof)
        .map(|dof| {
            if fixed[dof] {
                return prescribed[dof];
            }
            let p = mesh.node_coords(dof / 3);
            let comp = dof % 3;
            let x = p[comp] as f64 * mesh.h[comp];
            if comp == a {
                eps * x
            } else {
                -setup.poisson * eps * x
            }
        })
        .collect();

    let diag = mesh.diagonal();
    let free_count = fixed.iter().filter(|&&f| !f).count();
    let max_iter = opts.max_iter.unwrap_or((2 * free_count).max(2000));

    mesh.apply(&u, &mut kx);
    let mut r: Vec<f64> = kx
        .iter()
        .zip(&fixed)
        .map(|(v, &f)| if f { 0.0 } else { -v })
        .collect();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(v, d)| v / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; ndof];
    let mut iterations = 0;
    let target = opts.rel_tol * ref_norm;
    let mut res = dot(&r, &r).sqrt();
    while res > target && ref_norm > 0.0 {
        if iterations >= max_iter {
            return Err(Error::SolverNoConvergence {
                iterations,
                residual: res / ref_norm,
            });
        }
        mesh.apply(&p, &mut ap);
        ap.par_iter_mut().zip(fixed.par_iter()).for_each(|(v, &f)| {
            if f {
                *v = 0.0;
            }
        });
        let alpha = rz / dot(&p, &ap);
        u.par_iter_mut()
            .zip(p.par_iter())
            .for_each(|(x, pv)| *x += alpha * pv);
        r.par_iter_mut()
            .zip(ap.par_iter())
            .for_each(|(x, av)| *x -= alpha * av);
        z.par_iter_mut()
            .zip(r.par_iter().zip(diag.par_iter()))
            .for_each(|(zv, (rv, d))| *zv = rv / d);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut()
            .zip(z.par_iter())
            .for_each(|(pv, zv)| *pv = zv + beta * *pv);
        res = dot(&r, &r).sqrt();
        iterations += 1;
    }

    mesh.apply(&u, &mut kx);
    let force: f64 = (0..mesh.n_nodes())
        .filter(|&n| mesh.node_coords(n)[a] == mesh.dims[a])
        .map(|n| kx[3 * n + a])
        .sum();
    let (b, c) = ((a + 1) % 3, (a + 2) % 3);
    let area = mesh.dims[b] as f64 * mesh.h[b] * mesh.dims[c] as f64 * mesh.h[c];
    Ok(ElasticSolution {
        modulus: force / area / eps,
        iterations,
        rel_residual: if ref_norm > 0.0 { res / ref_norm } else { 0.0 },
    })
}

/// Displacement DOFs of a voxel mesh.
pub fn dof_count(dims: Dims) -> usize {
    3 * dims.0.iter().map(|n| n + 1).product::<usize>()
}
