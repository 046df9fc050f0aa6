//! Least-squares fit of correlation length and smoothness along one axis.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{minimize, NmOptions};
use super::{estimate_binary_cov, CovSampleSet, MeanField};
use crate::error::{Error, Result};
use crate::field::Axis;
use crate::numerics::{binary_cov_unchecked, matern_unchecked, Smoothness};
use crate::voxelgrid::VoxelGrid;

/// Gauss–Newton Hessian condition number above which a fit is flagged.
pub const CONDITION_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Fit both length and smoothness.
    Matern,
    /// Fit the length of the squared-exponential limit only.
    GaussianLimit,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Length bounds in voxels; defaults to `[0.5, 10 * extent]`.
    pub length_bounds: Option<(f64, f64)>,
    pub smoothness_bounds: (f64, f64),
    /// Starts per parameter; the multi-start grid has `starts^dim` points.
    pub starts: usize,
    pub nm: NmOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            length_bounds: None,
            smoothness_bounds: (0.05, 20.0),
            starts: 3,
            nm: NmOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisFit {
    pub axis: Axis,
    pub mode: FitMode,
    pub length: f64,
    pub length_std: f64,
    /// `None` in Gaussian-limit mode.
    pub smoothness: Option<f64>,
    pub smoothness_std: Option<f64>,
    pub residual: f64,
    pub n_lags: usize,
    pub n_samples: usize,
    pub condition_number: f64,
    pub ill_conditioned: bool,
    pub at_bound: bool,
}

impl AxisFit {
    pub fn smoothness_param(&self) -> Smoothness {
        match self.smoothness {
            Some(nu) => Smoothness::Matern(nu),
            None => Smoothness::GaussianLimit,
        }
    }

    /// True when the estimates should be read with caution.
    pub fn flagged(&self) -> bool {
        self.ill_conditioned || self.at_bound
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let fit: AxisFit = serde_json::from_str(text)?;
        if !(fit.length.is_finite() && fit.length > 0.0) {
            return Err(Error::Format(format!("bad length {}", fit.length)));
        }
        if let Some(nu) = fit.smoothness {
            if !(nu.is_finite() && nu > 0.0) {
                return Err(Error::Format(format!("bad smoothness {nu}")));
            }
        }
        Ok(fit)
    }
}

/// Samples sharing lag and (unordered) thresholds, reduced to count, mean and
/// within-group sum of squares so the objective is `sum ss + n (mean - model)^2`.
#[derive(Debug, Clone, Copy)]
struct Group {
    lag: usize,
    d1: f64,
    d2: f64,
    n: f64,
    mean: f64,
}

struct Problem {
    groups: Vec<Group>,
    within: f64,
    max_lag: usize,
    n_samples: usize,
}

impl Problem {
    fn new(set: &CovSampleSet) -> Result<Self> {
        if set.samples.is_empty() {
            return Err(Error::Empty("no covariance samples to fit".into()));
        }
        let mut acc: BTreeMap<(usize, u64, u64), Vec<f64>> = BTreeMap::new();
        for s in &set.samples {
            let (a, b) = if s.d_i <= s.d_j {
                (s.d_i, s.d_j)
            } else {
                (s.d_j, s.d_i)
            };
            acc.entry((s.lag, ordered_bits(a), ordered_bits(b)))
                .or_default()
                .push(s.gamma_hat);
        }
        let mut groups = Vec::with_capacity(acc.len());
        let mut within = 0.0;
        let mut max_lag = 0;
        for ((lag, a, b), vals) in acc {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let ss: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum();
            within += ss;
            max_lag = max_lag.max(lag);
            groups.push(Group {
                lag,
                d1: from_ordered_bits(a),
                d2: from_ordered_bits(b),
                n,
                mean,
            });
        }
        Ok(Problem {
            groups,
            within,
            max_lag,
            n_samples: set.samples.len(),
        })
    }

    fn rhos(&self, length: f64, nu: Smoothness) -> Vec<f64> {
        (0..=self.max_lag)
            .map(|lag| matern_unchecked(lag as f64, length, nu))
            .collect()
    }

    fn model(&self, length: f64, nu: Smoothness) -> Vec<f64> {
        let rhos = self.rhos(length, nu);
        self.groups
            .par_iter()
            .map(|g| binary_cov_unchecked(g.d1, g.d2, rhos[g.lag]))
            .collect()
    }

    fn objective(&self, length: f64, nu: Smoothness) -> f64 {
        let model = self.model(length, nu);
        // Sequential sum keeps the value independent of thread scheduling.
        self.within
            + self
                .groups
                .iter()
                .zip(&model)
                .map(|(g, m)| g.n * (g.mean - m).powi(2))
                .sum::<f64>()
    }
}

// Total order on f64 bit patterns, so thresholds can key a BTreeMap.
fn ordered_bits(v: f64) -> u64 {
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

fn from_ordered_bits(b: u64) -> f64 {
    if b >> 63 == 1 {
        f64::from_bits(b & !(1 << 63))
    } else {
        f64::from_bits(!b)
    }
}

fn smoothness_of(mode: FitMode, x: &[f64]) -> Smoothness {
    match mode {
        FitMode::Matern => Smoothness::Matern(x[1].exp()),
        FitMode::GaussianLimit => Smoothness::GaussianLimit,
    }
}

/// Sum of squared differences between estimated and modelled covariances.
pub fn residual(set: &CovSampleSet, length: f64, nu: Smoothness) -> Result<f64> {
    crate::numerics::matern_rho(1.0, length, nu)?;
    Ok(Problem::new(set)?.objective(length, nu))
}

/// Objective on a tensor grid; `out[a][b]` is at `lengths[a]`, `smoothness[b]`.
pub fn residual_grid(
    set: &CovSampleSet,
    lengths: &[f64],
    smoothness: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let problem = Problem::new(set)?;
    lengths
        .iter()
        .map(|&l| {
            smoothness
                .iter()
                .map(|&nu| {
                    crate::numerics::matern_rho(1.0, l, Smoothness::Matern(nu))?;
                    Ok(problem.objective(l, Smoothness::Matern(nu)))
                })
                .collect()
        })
        .collect()
}

pub fn fit_axis(set: &CovSampleSet, mode: FitMode) -> Result<AxisFit> {
    fit_axis_with(set, mode, &FitOptions::default())
}

pub fn fit_axis_with(set: &CovSampleSet, mode: FitMode, opts: &FitOptions) -> Result<AxisFit> {
    let problem = Problem::new(set)?;
    let (l_lo, l_hi) = opts
        .length_bounds
        .unwrap_or((0.5, 10.0 * set.axis_extent.max(1) as f64));
    let (nu_lo, nu_hi) = opts.smoothness_bounds;
    if !(l_lo > 0.0 && l_hi > l_lo && nu_lo > 0.0 && nu_hi > nu_lo) {
        return Err(Error::InvalidParameter("empty parameter box".into()));
    }
    let mut lo = vec![l_lo.ln()];
    let mut hi = vec![l_hi.ln()];
    if mode == FitMode::Matern {
        lo.push(nu_lo.ln());
        hi.push(nu_hi.ln());
    }
    let dim = lo.len();
    let f = |x: &[f64]| problem.objective(x[0].exp(), smoothness_of(mode, x));

    // Interior grid of starts, evenly spaced in log space.
    let k = opts.starts.max(1);
    let ticks: Vec<f64> = (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect();
    let mut starts = Vec::new();
    for &t0 in &ticks {
        if dim == 1 {
            starts.push(vec![lo[0] + t0 * (hi[0] - lo[0])]);
        } else {
            for &t1 in &ticks {
                starts.push(vec![
                    lo[0] + t0 * (hi[0] - lo[0]),
                    lo[1] + t1 * (hi[1] - lo[1]),
                ]);
            }
        }
    }
    let mut best = None::<super::optim::NmResult>;
    for x0 in &starts {
        let r = minimize(f, x0, &lo, &hi, &opts.nm);
        if best.as_ref().map_or(true, |b| r.f < b.f) {
            best = Some(r);
        }
    }
    let first = best.expect("at least one start");
    // A restart from the best point guards against a collapsed simplex.
    let polish_opts = NmOptions {
        init_step: opts.nm.init_step * 0.1,
        ..opts.nm
    };
    let polished = minimize(f, &first.x, &lo, &hi, &polish_opts);
    let best = if polished.f <= first.f {
        polished
    } else {
        first
    };
    if !best.converged {
        return Err(Error::NoConvergence {
            best_residual: best.f,
            best_params: best.x.iter().map(|v| v.exp()).collect(),
        });
    }

    let length = best.x[0].exp();
    let nu = smoothness_of(mode, &best.x);
    let at_bound = best
        .x
        .iter()
        .zip(lo.iter().zip(&hi))
        .any(|(&v, (&a, &b))| (v - a).abs() < 1e-6 || (b - v).abs() < 1e-6);

    let (stds, cond) = gauss_newton(&problem, mode, &best.x, best.f);
    // JSON cannot carry infinities; a singular Hessian is reported as f64::MAX.
    let cap = |v: f64| if v.is_finite() { v } else { f64::MAX };
    Ok(AxisFit {
        axis: set.axis,
        mode,
        length,
        length_std: cap(stds[0]),
        smoothness: nu.value(),
        smoothness_std: stds.get(1).copied().map(cap),
        residual: best.f,
        n_lags: set.n_lags,
        n_samples: problem.n_samples,
        condition_number: cap(cond),
        ill_conditioned: !(cond <= CONDITION_LIMIT),
        at_bound,
    })
}

/// Standard deviations of the natural parameters and the condition number of
/// `J^T J` in log parameters, with `J` the weighted model Jacobian.
fn gauss_newton(problem: &Problem, mode: FitMode, x: &[f64], s2: f64) -> (Vec<f64>, f64) {
    let dim = x.len();
    let h = 1e-4;
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for k in 0..dim {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += h;
        xm[k] -= h;
        let mp = problem.model(xp[0].exp(), smoothness_of(mode, &xp));
        let mm = problem.model(xm[0].exp(), smoothness_of(mode, &xm));
        cols.push(
            problem
                .groups
                .iter()
                .zip(mp.iter().zip(&mm))
                .map(|(g, (p, m))| g.n.sqrt() * (p - m) / (2.0 * h))
                .collect(),
        );
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let dof = (problem.n_samples as f64 - dim as f64).max(1.0);
    let sigma2 = s2 / dof;
    if dim == 1 {
        let a = dot(&cols[0], &cols[0]);
        let var_log = if a > 0.0 { sigma2 / a } else { f64::INFINITY };
        let cond = if a > 0.0 { 1.0 } else { f64::INFINITY };
        return (vec![x[0].exp() * var_log.sqrt()], cond);
    }
    let a = dot(&cols[0], &cols[0]);
    let b = dot(&cols[0], &cols[1]);
    let c = dot(&cols[1], &cols[1]);
    let det = a * c - b * b;
    let tr = a + c;
    let disc = ((a - c).powi(2) + 4.0 * b * b).sqrt();
    let (l_max, l_min) = (0.5 * (tr + disc), 0.5 * (tr - disc));
    let cond = if l_min > 0.0 {
        l_max / l_min
    } else {
        f64::INFINITY
    };
    let (v0, v1) = if det > 0.0 {
        (sigma2 * c / det, sigma2 * a / det)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    (vec![x[0].exp() * v0.sqrt(), x[1].exp() * v1.sqrt()], cond)
}

/// Fits repeated with growing lag counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagStudy {
    pub fits: Vec<AxisFit>,
    /// Fitted length increased at every step, the signature of a flat objective.
    pub length_keeps_growing: bool,
}

pub fn lag_convergence_study(
    cells: &[VoxelGrid],
    mean: &MeanField,
    axis: Axis,
    lag_counts: &[usize],
    mode: FitMode,
) -> Result<LagStudy> {
    if lag_counts.is_empty() {
        return Err(Error::Empty("no lag counts".into()));
    }
    let mut fits = Vec::with_capacity(lag_counts.len());
    for &n in lag_counts {
        let set = estimate_binary_cov(cells, mean, axis, n)?;
        fits.push(fit_axis(&set, mode)?);
    }
    let length_keeps_growing =
        fits.len() > 2 && fits.windows(2).all(|w| w[1].length > w[0].length * 1.01);
    Ok(LagStudy {
        fits,
        length_keeps_growing,
    })
}
