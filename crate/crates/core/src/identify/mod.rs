//! Learning the model from a segmented volume.
//!
//! Unit cells of one specimen are pooled as realizations of the same binary
//! field. Their per-voxel average gives the mean field and, through the
//! normal quantile, the threshold field; axis-aligned pairs within a cell give
//! covariance samples that are fitted by the Matérn-based binary covariance.

mod fit;
mod optim;

pub use optim::NmOptions;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Axis, Dims, Field3};
use crate::numerics::{std_normal_cdf, std_normal_inv_cdf};
use crate::voxelgrid::VoxelGrid;

pub use fit::{
    fit_axis, fit_axis_with, lag_convergence_study, residual, residual_grid, AxisFit, FitMode,
    FitOptions, LagStudy, CONDITION_LIMIT,
};

/// Voxels whose estimated mean falls outside this interval contribute no pairs.
pub const MEAN_FILTER: (f64, f64) = (0.1, 0.9);

/// Per-voxel material probability on one unit cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanField {
    dims: Dims,
    values: Vec<f64>,
}

impl MeanField {
    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} mean values for cell dims {dims}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!(
                "mean value {v} outside [0, 1]"
            )));
        }
        Ok(MeanField { dims, values })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mean field serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: MeanField = serde_json::from_str(text)?;
        Self::new(raw.dims, raw.values)
    }
}

/// Piecewise-constant truncation level on one unit cell. Voxels that are
/// always material hold `-inf`, voxels that are always void hold `+inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdField {
    dims: Dims,
    #[serde(with = "sentinel_vec")]
    values: Vec<f64>,
}

impl ThresholdField {
    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} thresholds for cell dims {dims}",
                values.len()
            )));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidParameter("NaN threshold".into()));
        }
        Ok(ThresholdField { dims, values })
    }

    pub fn constant(dims: Dims, value: f64) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_field(&self) -> Field3 {
        Field3::from_vec(self.dims, self.values.clone()).expect("dims checked at construction")
    }

    /// Material probability `1 - Phi(d)` implied by the thresholds.
    pub fn implied_mean(&self) -> MeanField {
        MeanField {
            dims: self.dims,
            values: self
                .values
                .iter()
                .map(|&d| 1.0 - std_normal_cdf(d))
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("threshold field serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: ThresholdField = serde_json::from_str(text)?;
        Self::new(raw.dims, raw.values)
    }
}

/// JSON has no infinities; the sentinels travel as the strings `"inf"` and `"-inf"`.
mod sentinel_vec {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Sentinel(String),
    }

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let reprs: Vec<Repr> = values
            .iter()
            .map(|&v| {
                if v == f64::INFINITY {
                    Repr::Sentinel("inf".into())
                } else if v == f64::NEG_INFINITY {
                    Repr::Sentinel("-inf".into())
                } else {
                    Repr::Num(v)
                }
            })
            .collect();
        reprs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let reprs = Vec::<Repr>::deserialize(d)?;
        reprs
            .into_iter()
            .map(|r| match r {
                Repr::Num(v) => Ok(v),
                Repr::Sentinel(s) => match s.as_str() {
                    "inf" | "+inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    other => Err(D::Error::custom(format!("bad threshold {other:?}"))),
                },
            })
            .collect()
    }
}

/// Per-voxel average over cells.
pub fn estimate_mean_field(cells: &[VoxelGrid]) -> Result<MeanField> {
    let first = cells
        .first()
        .ok_or_else(|| Error::Empty("no cells to average".into()))?;
    let dims = first.dims();
    let counts = material_counts(cells, dims)?;
    let n = cells.len() as f64;
    Ok(MeanField {
        dims,
        values: counts.iter().map(|&c| c as f64 / n).collect(),
    })
}

fn material_counts(cells: &[VoxelGrid], dims: Dims) -> Result<Vec<u32>> {
    let mut counts = vec![0u32; dims.len()];
    for (n, cell) in cells.iter().enumerate() {
        if cell.dims() != dims {
            return Err(Error::Shape(format!(
                "cell {n} has dims {}, expected {dims}",
                cell.dims()
            )));
        }
        for (c, &v) in counts.iter_mut().zip(cell.as_bytes()) {
            *c += u32::from(v);
        }
    }
    Ok(counts)
}

/// `d = Phi^-1(1 - mu)` per voxel.
pub fn mean_to_threshold(mean: &MeanField) -> ThresholdField {
    let values = mean
        .values
        .iter()
        .map(|&mu| std_normal_inv_cdf(1.0 - mu).expect("mean field values lie in [0, 1]"))
        .collect();
    ThresholdField {
        dims: mean.dims,
        values,
    }
}

/// One estimated covariance between voxels `i` and `j` (local linear indices).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovSample {
    pub lag: usize,
    pub i: usize,
    pub j: usize,
    pub d_i: f64,
    pub d_j: f64,
    pub gamma_hat: f64,
}

/// Covariance samples along one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovSampleSet {
    pub axis: Axis,
    pub n_lags: usize,
    pub n_cells: usize,
    /// Cell extent along `axis`, in voxels.
    pub axis_extent: usize,
    pub samples: Vec<CovSample>,
}

impl CovSampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Keeps only samples with lag at most `n_lags`.
    pub fn truncated(&self, n_lags: usize) -> CovSampleSet {
        CovSampleSet {
            n_lags: n_lags.min(self.n_lags),
            samples: self
                .samples
                .iter()
                .filter(|s| s.lag <= n_lags)
                .copied()
                .collect(),
            ..*self
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("covariance samples serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: CovSampleSet = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            if s.lag == 0 || s.lag > self.n_lags {
                return Err(Error::Format(format!("sample lag {} out of range", s.lag)));
            }
            if !s.d_i.is_finite() || !s.d_j.is_finite() {
                return Err(Error::Format(
                    "covariance sample with infinite threshold".into(),
                ));
            }
            if !(-0.25..=0.25).contains(&s.gamma_hat) {
                return Err(Error::Format(format!(
                    "covariance {} outside [-0.25, 0.25]",
                    s.gamma_hat
                )));
            }
        }
        Ok(())
    }

    /// `lag,d_i,d_j,gamma_hat` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["lag", "d_i", "d_j", "gamma_hat"])?;
        for s in &self.samples {
            wr.serialize((s.lag, s.d_i, s.d_j, s.gamma_hat))?;
        }
        wr.flush().map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    /// Reads `lag,d_i,d_j,gamma_hat` rows; voxel indices are not recorded in CSV.
    pub fn read_csv(axis: Axis, axis_extent: usize, n_cells: usize, text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let mut samples = Vec::new();
        for row in rd.deserialize::<(usize, f64, f64, f64)>() {
            let (lag, d_i, d_j, gamma_hat) = row?;
            samples.push(CovSample {
                lag,
                i: 0,
                j: 0,
                d_i,
                d_j,
                gamma_hat,
            });
        }
        let n_lags = samples.iter().map(|s| s.lag).max().unwrap_or(0);
        let set = CovSampleSet {
            axis,
            n_lags,
            n_cells,
            axis_extent,
            samples,
        };
        set.validate()?;
        Ok(set)
    }
}

fn passes_filter(mu: f64) -> bool {
    (MEAN_FILTER.0..=MEAN_FILTER.1).contains(&mu)
}

/// Sample covariance (denominator `N_cells`) for every in-cell pair along
/// `axis` with lag `1..=n_lags`. For each lag the left voxel ranges over the
/// first `extent - n_lags` positions, so every lag contributes the same count
/// of pairs before filtering.
pub fn estimate_binary_cov(
    cells: &[VoxelGrid],
    mean: &MeanField,
    axis: Axis,
    n_lags: usize,
) -> Result<CovSampleSet> {
    if cells.is_empty() {
        return Err(Error::Empty("no cells".into()));
    }
    let dims = mean.dims;
    let extent = dims.extent(axis);
    if n_lags == 0 || n_lags >= extent {
        return Err(Error::InvalidParameter(format!(
            "n_lags {n_lags} must lie in 1..{extent} for axis {}",
            axis.name()
        )));
    }
    let thresholds = mean_to_threshold(mean);
    let stride = dims.stride(axis);
    let n = cells.len();
    let nf = n as f64;

    // Anchors: left voxels whose axis coordinate leaves room for every lag.
    let anchors: Vec<usize> = (0..dims.len())
        .filter(|&idx| dims.coords(idx)[axis.index()] < extent - n_lags)
        .collect();

    for (k, cell) in cells.iter().enumerate() {
        if cell.dims() != dims {
            return Err(Error::Shape(format!(
                "cell {k} has dims {}, expected {dims}",
                cell.dims()
            )));
        }
    }

    let per_lag: Vec<Vec<CovSample>> = (1..=n_lags)
        .into_par_iter()
        .map(|lag| {
            let mut out = Vec::new();
            for &i in &anchors {
                let j = i + lag * stride;
                let (mi, mj) = (mean.values[i], mean.values[j]);
                if !passes_filter(mi) || !passes_filter(mj) {
                    continue;
                }
                // Integer counts keep the estimate independent of cell order.
                let (mut ci, mut cj, mut cij) = (0usize, 0usize, 0usize);
                for c in cells {
                    let b = c.as_bytes();
                    ci += usize::from(b[i]);
                    cj += usize::from(b[j]);
                    cij += usize::from(b[i] & b[j]);
                }
                // (1/N) sum_k (y_i - mu_i)(y_j - mu_j), expanded.
                let gamma_hat =
                    cij as f64 / nf - mj * ci as f64 / nf - mi * cj as f64 / nf + mi * mj;
                out.push(CovSample {
                    lag,
                    i,
                    j,
                    d_i: thresholds.values[i],
                    d_j: thresholds.values[j],
                    gamma_hat,
                });
            }
            out
        })
        .collect();
    let samples: Vec<CovSample> = per_lag.into_iter().flatten().collect();
    if samples.is_empty() {
        return Err(Error::Empty(format!(
            "all voxel pairs along {} were filtered out",
            axis.name()
        )));
    }
    Ok(CovSampleSet {
        axis,
        n_lags,
        n_cells: n,
        axis_extent: extent,
        samples,
    })
}

/// Zero-lag diagnostic: the same estimator applied to `(x, x)` pairs, which
/// reduces to `mu (1 - mu)` per voxel.
pub fn zero_lag_covariance(cells: &[VoxelGrid], mean: &MeanField) -> Result<Vec<f64>> {
    if cells.is_empty() {
        return Err(Error::Empty("no cells".into()));
    }
    let counts = material_counts(cells, mean.dims)?;
    let nf = cells.len() as f64;
    Ok(counts
        .iter()
        .zip(&mean.values)
        .map(|(&c, &mu)| c as f64 / nf - mu * mu)
        .collect())
}
