//! Scalar quantities of interest per realization and discretization level.

mod fem;

use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Axis, Dims};
use crate::voxelgrid::VoxelGrid;

pub use fem::{
    dof_count, element_stiffness, solve_homogenized_e, solve_homogenized_e_with, ElasticSolution,
    ElasticitySetup, SolverOptions,
};

/// Majority-vote block coarsening: a block becomes material when at least
/// half of it is. Axes of extent 1 are left alone so 2D slices stay 2D.
pub fn coarsen(grid: &VoxelGrid, factor: usize) -> Result<VoxelGrid> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::InvalidParameter(format!(
            "coarsening factor {factor} is not a power of two"
        )));
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    let dims = grid.dims();
    let f: [usize; 3] = std::array::from_fn(|a| if dims.0[a] == 1 { 1 } else { factor });
    for a in 0..3 {
        if dims.0[a] % f[a] != 0 {
            return Err(Error::Shape(format!(
                "dims {dims} not divisible by coarsening factor {factor}"
            )));
        }
    }
    let coarse = Dims(std::array::from_fn(|a| dims.0[a] / f[a]));
    let block = f[0] * f[1] * f[2];
    let src = grid.as_bytes();
    let data: Vec<u8> = (0..coarse.len())
        .map(|idx| {
            let [ci, cj, ck] = coarse.coords(idx);
            let mut count = 0;
            for k in ck * f[2]..(ck + 1) * f[2] {
                for j in cj * f[1]..(cj + 1) * f[1] {
                    let row = dims.index(ci * f[0], j, k);
                    count += src[row..row + f[0]]
                        .iter()
                        .map(|&v| usize::from(v))
                        .sum::<usize>();
                }
            }
            u8::from(2 * count >= block)
        })
        .collect();
    let spacing = grid.spacing();
    VoxelGrid::new(
        coarse,
        std::array::from_fn(|a| spacing[a] * f[a] as f64),
        data,
    )
}

fn coarse_dims(fine: Dims, factor: usize) -> Dims {
    Dims(std::array::from_fn(|a| {
        if fine.0[a] == 1 {
            1
        } else {
            fine.0[a] / factor
        }
    }))
}

/// One member of the discretization hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub level: usize,
    /// Coarsening factor `2^(max_level - level)` relative to the finest grid.
    pub factor: usize,
    /// Displacement DOFs of the coarsened mesh.
    pub dofs: usize,
    pub dims: Dims,
}

impl LevelSpec {
    /// Levels `0..=max_level` on `fine`; level `max_level` is the fine grid itself.
    pub fn hierarchy(fine: Dims, max_level: usize) -> Result<Vec<LevelSpec>> {
        fine.validate()?;
        if fine.0.iter().all(|&n| n == 1) && max_level > 0 {
            return Err(Error::Shape("a single voxel cannot be coarsened".into()));
        }
        let top = 1usize
            .checked_shl(max_level as u32)
            .ok_or_else(|| Error::InvalidParameter(format!("max level {max_level} too large")))?;
        for a in 0..3 {
            if fine.0[a] > 1 && fine.0[a] % top != 0 {
                return Err(Error::Shape(format!(
                    "dims {fine} not divisible by 2^{max_level}"
                )));
            }
        }
        Ok((0..=max_level)
            .map(|level| {
                let factor = 1 << (max_level - level);
                let dims = coarse_dims(fine, factor);
                LevelSpec {
                    level,
                    factor,
                    dofs: dof_count(dims),
                    dims,
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QoiKind {
    Porosity,
    YoungsModulus,
}

impl FromStr for QoiKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "porosity" => Ok(QoiKind::Porosity),
            "youngs_modulus" => Ok(QoiKind::YoungsModulus),
            other => Err(Error::InvalidParameter(format!(
                "unknown QoI kind {other:?}"
            ))),
        }
    }
}

impl QoiKind {
    pub fn name(self) -> &'static str {
        match self {
            QoiKind::Porosity => "porosity",
            QoiKind::YoungsModulus => "youngs_modulus",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QoiValue {
    pub value: f64,
    pub cost_seconds: f64,
}

/// Coarsens `grid` (given at the finest resolution) to `level` and evaluates.
pub fn evaluate_qoi(
    grid: &VoxelGrid,
    setup: &ElasticitySetup,
    level: &LevelSpec,
    kind: QoiKind,
) -> Result<QoiValue> {
    let start = Instant::now();
    let coarse = coarsen(grid, level.factor)?;
    if coarse.dims() != level.dims {
        return Err(Error::Shape(format!(
            "grid coarsens to {}, level expects {}",
            coarse.dims(),
            level.dims
        )));
    }
    let value = match kind {
        QoiKind::Porosity => coarse.porosity(),
        QoiKind::YoungsModulus => solve_homogenized_e(&coarse, setup)?,
    };
    Ok(QoiValue {
        value,
        cost_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QoiRecord {
    pub index: u64,
    pub level: usize,
    pub kind: QoiKind,
    pub value: f64,
    pub cost_seconds: f64,
}

pub fn write_records<W: Write>(records: &[QoiRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    if records.is_empty() {
        wr.write_record(["index", "level", "kind", "value", "cost_seconds"])?;
    }
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn read_records(text: &str) -> Result<Vec<QoiRecord>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let records: Vec<QoiRecord> = rd.deserialize().collect::<std::result::Result<_, _>>()?;
    if let Some(r) = records
        .iter()
        .find(|r| !r.value.is_finite() || r.cost_seconds < 0.0)
    {
        return Err(Error::Format(format!("bad record for index {}", r.index)));
    }
    Ok(records)
}

/// Default load axis for a grid: x.
pub fn default_setup(e_material: f64) -> ElasticitySetup {
    ElasticitySetup::new(e_material, Axis::X).expect("positive modulus")
}
