//! Tabular outputs of an MLMC run.

use std::io::Write;

use serde::Serialize;

use super::MomentEstimates;
use crate::error::{Error, Result};
use crate::numerics::std_normal_inv_cdf;

/// Probability masses of the reported normal-fit intervals.
pub const INTERVAL_MASSES: [f64; 4] = [0.90, 0.95, 0.98, 0.99];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub mass: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Central intervals of `N(mean, std^2)` holding each mass.
pub fn normal_intervals(mean: f64, std: f64) -> Vec<Interval> {
    INTERVAL_MASSES
        .iter()
        .map(|&p| {
            let z = std_normal_inv_cdf(0.5 + 0.5 * p).expect("mass in (0, 1)");
            Interval {
                mass: p,
                lower: mean - z * std,
                upper: mean + z * std,
            }
        })
        .collect()
}

pub fn write_intervals_csv<W: Write>(est: &MomentEstimates, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for iv in normal_intervals(est.mean, est.std) {
        wr.serialize(iv)?;
    }
    wr.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// `level, dofs, samples, mean_delta, var_delta, cost` per level.
pub fn write_levels_csv<W: Write>(est: &MomentEstimates, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "level",
        "dofs",
        "samples",
        "mean_delta",
        "var_delta",
        "cost",
        "delta_h2",
        "var_delta_h2",
    ])?;
    for s in &est.levels {
        wr.serialize((
            s.level,
            s.dofs,
            s.samples,
            s.mean_delta,
            s.var_delta,
            s.cost,
            s.delta_h2,
            s.var_delta_h2,
        ))?;
    }
    wr.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}
