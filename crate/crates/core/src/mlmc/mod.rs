//! Multilevel Monte Carlo estimation of the QoI mean and central moments.
//!
//! A pilot run on the first few levels feeds power-law screening fits for
//! bias, variance and cost against the DOF count. The fits fix the finest
//! level and the per-level sample counts; the driver then tops up samples
//! until the plan is met.

mod report;
mod stats;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::Generator;
use crate::qoi::{evaluate_qoi, ElasticitySetup, LevelSpec, QoiKind, QoiRecord};

pub use report::{
    normal_intervals, write_intervals_csv, write_levels_csv, Interval, INTERVAL_MASSES,
};
pub use stats::{
    delta_h2, h2, h3, h4, h_stat, mlmc_central_moment, mlmc_mean, power_sums, LevelEnsemble,
    PowerSums,
};

/// Bits reserved for the per-level sample counter in a sample index.
pub const INDEX_SHIFT: u32 = 40;

/// Globally unique sample index: levels use disjoint ranges.
pub fn sample_index(level: usize, i: u64) -> u64 {
    ((level as u64) << INDEX_SHIFT) | i
}

/// Every level keeps at least this many samples so all four moments exist.
pub const MIN_SAMPLES: usize = 4;

/// `c * M^exponent` when `growing`, `c * M^-exponent` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLaw {
    pub c: f64,
    pub exponent: f64,
    pub growing: bool,
    /// Sum of squared residuals in log space.
    pub residual: f64,
    pub n_points: usize,
}

impl PowerLaw {
    pub fn eval(&self, dofs: f64) -> f64 {
        let e = if self.growing {
            self.exponent
        } else {
            -self.exponent
        };
        self.c * dofs.powf(e)
    }
}

/// Log-log least squares. Nonpositive observations are dropped; at least
/// three must remain.
pub fn fit_power_law(dofs: &[f64], values: &[f64], growing: bool) -> Result<PowerLaw> {
    if dofs.len() != values.len() {
        return Err(Error::Shape("dofs and values differ in length".into()));
    }
    let pts: Vec<(f64, f64)> = dofs
        .iter()
        .zip(values)
        .filter(|(m, v)| **m > 0.0 && **v > 0.0 && v.is_finite())
        .map(|(m, v)| (m.ln(), v.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::InsufficientSamples(format!(
            "power-law fit needs 3 positive observations, got {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter(
            "all observations share one DOF count".into(),
        ));
    }
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
    let intercept = my - slope * mx;
    let residual = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    Ok(PowerLaw {
        c: intercept.exp(),
        exponent: if growing { slope } else { -slope },
        growing,
        residual,
        n_points: pts.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreeningTarget {
    BiasMean,
    BiasVar,
    VarianceMean,
    VarianceVar,
    Cost,
}

/// Observed per-level statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub dofs: usize,
    pub samples: usize,
    pub mean_delta: f64,
    /// Per-sample variance of `fine - coarse`.
    pub var_delta: f64,
    pub cost: f64,
    pub delta_h2: f64,
    pub var_delta_h2: f64,
}

pub fn level_stats(ensembles: &[LevelEnsemble], levels: &[LevelSpec]) -> Result<Vec<LevelStats>> {
    ensembles
        .iter()
        .map(|e| {
            let spec = levels
                .get(e.level)
                .ok_or_else(|| Error::Shape(format!("no level spec for level {}", e.level)))?;
            Ok(LevelStats {
                level: e.level,
                dofs: spec.dofs,
                samples: e.len(),
                mean_delta: e.mean_delta()?,
                var_delta: e.var_delta()?,
                cost: e.mean_cost(),
                delta_h2: e.delta_h(2)?,
                var_delta_h2: e.var_delta_h2()?,
            })
        })
        .collect()
}

/// Fits one screening quantity. Bias and variance use levels `>= 1` (level 0
/// has no coarse partner); cost uses every level.
pub fn screening_fit(stats: &[LevelStats], target: ScreeningTarget) -> Result<PowerLaw> {
    let use_level = |s: &&LevelStats| target == ScreeningTarget::Cost || s.level >= 1;
    let (m, v): (Vec<f64>, Vec<f64>) = stats
        .iter()
        .filter(use_level)
        .map(|s| {
            let v = match target {
                ScreeningTarget::BiasMean => s.mean_delta.abs(),
                ScreeningTarget::BiasVar => s.delta_h2.abs(),
                ScreeningTarget::VarianceMean => s.var_delta,
                ScreeningTarget::VarianceVar => s.var_delta_h2,
                ScreeningTarget::Cost => s.cost,
            };
            (s.dofs as f64, v)
        })
        .unzip();
    fit_power_law(&m, &v, target == ScreeningTarget::Cost)
}

/// Screening fits; `None` marks a quantity that is identically zero on the
/// pilot levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningFit {
    pub bias_mean: Option<PowerLaw>,
    pub variance_mean: Option<PowerLaw>,
    pub bias_var: Option<PowerLaw>,
    pub variance_var: Option<PowerLaw>,
    pub cost: PowerLaw,
}

fn optional_fit(stats: &[LevelStats], target: ScreeningTarget) -> Result<Option<PowerLaw>> {
    let all_zero = stats.iter().filter(|s| s.level >= 1).all(|s| {
        let v = match target {
            ScreeningTarget::BiasMean => s.mean_delta,
            ScreeningTarget::BiasVar => s.delta_h2,
            ScreeningTarget::VarianceMean => s.var_delta,
            ScreeningTarget::VarianceVar => s.var_delta_h2,
            ScreeningTarget::Cost => s.cost,
        };
        v == 0.0
    });
    if all_zero {
        Ok(None)
    } else {
        screening_fit(stats, target).map(Some)
    }
}

pub fn screening(stats: &[LevelStats]) -> Result<ScreeningFit> {
    if stats.iter().filter(|s| s.level >= 1).count() < 3 {
        return Err(Error::InsufficientSamples(
            "screening needs at least three levels above level 0".into(),
        ));
    }
    Ok(ScreeningFit {
        bias_mean: optional_fit(stats, ScreeningTarget::BiasMean)?,
        variance_mean: optional_fit(stats, ScreeningTarget::VarianceMean)?,
        bias_var: optional_fit(stats, ScreeningTarget::BiasVar)?,
        variance_var: optional_fit(stats, ScreeningTarget::VarianceVar)?,
        cost: screening_fit(stats, ScreeningTarget::Cost)?,
    })
}

/// Smallest DOF count whose bias `c M^-alpha` is at most `eps / sqrt 2`.
pub fn required_dofs(bias: &PowerLaw, eps: f64) -> f64 {
    if bias.exponent <= 0.0 {
        return if bias.c <= eps / 2f64.sqrt() {
            0.0
        } else {
            f64::INFINITY
        };
    }
    (eps / (bias.c * 2f64.sqrt())).powf(-1.0 / bias.exponent)
}

/// Real-valued optimal sample counts `(2/eps^2) sqrt(V_l/C_l) sum_k sqrt(V_k C_k)`.
pub fn optimal_samples(variances: &[f64], costs: &[f64], eps: f64) -> Vec<f64> {
    let total: f64 = variances
        .iter()
        .zip(costs)
        .map(|(v, c)| (v * c).sqrt())
        .sum();
    variances
        .iter()
        .zip(costs)
        .map(|(v, c)| {
            if *v <= 0.0 {
                0.0
            } else {
                2.0 / (eps * eps) * (v / c).sqrt() * total
            }
        })
        .collect()
}

/// Ceiling of a real sample count. Values within `1e-9` (relative) of an
/// integer round to it, so floating-point noise never adds a whole sample.
pub fn ceil_count(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub max_level: usize,
    pub dofs_max: usize,
    pub samples: Vec<usize>,
}

/// Which moment a plan targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanTarget {
    Mean,
    Variance,
}

/// Plans levels and samples for absolute tolerance `eps = rel_tol * |estimate|`.
///
/// Observed variances and costs are used on levels already sampled, the
/// screening laws beyond. Counts never drop below `drawn` or [`MIN_SAMPLES`].
pub fn plan(
    fit: &ScreeningFit,
    stats: &[LevelStats],
    levels: &[LevelSpec],
    rel_tol: f64,
    estimate: f64,
    drawn: &[usize],
    target: PlanTarget,
) -> Result<Plan> {
    if !(rel_tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "relative tolerance {rel_tol}"
        )));
    }
    let pilot_top = stats.len().saturating_sub(1);
    let (bias, var_law) = match target {
        PlanTarget::Mean => (fit.bias_mean, fit.variance_mean),
        PlanTarget::Variance => (fit.bias_var, fit.variance_var),
    };
    let observed_var = |s: &LevelStats| match target {
        PlanTarget::Mean => s.var_delta,
        PlanTarget::Variance => s.var_delta_h2,
    };
    let eps = rel_tol * estimate.abs();
    let all_var_zero = stats.iter().all(|s| observed_var(s) == 0.0) && var_law.is_none();

    let max_level = match bias {
        None => pilot_top,
        Some(law) => {
            let need = required_dofs(&law, eps);
            match levels.iter().position(|l| l.dofs as f64 >= need) {
                Some(l) => l.max(pilot_top),
                None => {
                    let cap = levels.last().expect("nonempty hierarchy");
                    return Err(Error::ToleranceUnreachable {
                        requested: eps,
                        achievable: 2f64.sqrt() * law.eval(cap.dofs as f64),
                    });
                }
            }
        }
    };
    if max_level >= levels.len() {
        return Err(Error::Shape(format!(
            "level {max_level} beyond the hierarchy"
        )));
    }

    let mut v = Vec::with_capacity(max_level + 1);
    let mut c = Vec::with_capacity(max_level + 1);
    for (l, spec) in levels.iter().enumerate().take(max_level + 1) {
        let m = spec.dofs as f64;
        match stats.get(l).filter(|s| s.samples >= 2) {
            Some(s) => {
                v.push(observed_var(s));
                c.push(if s.cost > 0.0 {
                    s.cost
                } else {
                    fit.cost.eval(m)
                });
            }
            None => {
                v.push(var_law.map_or(0.0, |law| law.eval(m)));
                c.push(fit.cost.eval(m));
            }
        }
    }
    let samples: Vec<usize> = if all_var_zero {
        vec![0; max_level + 1]
    } else if eps == 0.0 {
        return Err(Error::InvalidParameter(
            "relative tolerance is undefined for a zero estimate".into(),
        ));
    } else {
        optimal_samples(&v, &c, eps)
            .into_iter()
            .map(ceil_count)
            .collect()
    };
    let samples = samples
        .into_iter()
        .enumerate()
        .map(|(l, n)| n.max(MIN_SAMPLES).max(drawn.get(l).copied().unwrap_or(0)))
        .collect();
    Ok(Plan {
        max_level,
        dofs_max: levels[max_level].dofs,
        samples,
    })
}

/// Elementwise maximum of two plans.
pub fn combine_plans(a: &Plan, b: &Plan) -> Plan {
    let top = if a.max_level >= b.max_level { a } else { b };
    let samples = (0..=top.max_level)
        .map(|l| {
            a.samples
                .get(l)
                .copied()
                .unwrap_or(0)
                .max(b.samples.get(l).copied().unwrap_or(0))
        })
        .collect();
    Plan {
        max_level: top.max_level,
        dofs_max: top.dofs_max,
        samples,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Measured wall-clock seconds per sample.
    Measured,
    /// `M_l + M_(l-1)`, which keeps plans reproducible run to run.
    Nominal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlmcConfig {
    pub rel_tol: f64,
    /// Pilot levels are `0..=pilot_levels`.
    pub pilot_levels: usize,
    pub pilot_samples: usize,
    /// Highest level the driver may use.
    pub max_level: usize,
    /// Base seed of the realization generator. The driver itself draws
    /// nothing; sample `i` of level `l` is model index `sample_index(l, i)`.
    pub seed: u64,
    #[serde(default = "default_budget")]
    pub max_samples_per_level: usize,
    /// Config files default to nominal cost so reruns are identical.
    #[serde(default = "nominal_cost")]
    pub cost_mode: CostMode,
    /// Also plan for the variance estimate, not only the mean.
    #[serde(default = "default_true")]
    pub plan_variance: bool,
    #[serde(default = "default_rounds")]
    pub max_rounds: usize,
}

fn default_budget() -> usize {
    1_000_000
}
fn nominal_cost() -> CostMode {
    CostMode::Nominal
}
fn default_true() -> bool {
    true
}
fn default_rounds() -> usize {
    10
}

impl MlmcConfig {
    pub fn new(rel_tol: f64, pilot_levels: usize, max_level: usize, seed: u64) -> Self {
        MlmcConfig {
            rel_tol,
            pilot_levels,
            pilot_samples: 20,
            max_level,
            seed,
            max_samples_per_level: default_budget(),
            cost_mode: CostMode::Measured,
            plan_variance: true,
            max_rounds: default_rounds(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(Error::Config(format!(
                "rel_tol {} must be positive",
                self.rel_tol
            )));
        }
        if self.pilot_levels < 3 {
            return Err(Error::Config(
                "pilot_levels must be at least 3 so screening has three level differences".into(),
            ));
        }
        if self.pilot_levels > self.max_level {
            return Err(Error::Config("pilot_levels exceeds max_level".into()));
        }
        if self.pilot_samples < 2 {
            return Err(Error::Config("pilot_samples must be at least 2".into()));
        }
        if self.max_samples_per_level < MIN_SAMPLES.max(self.pilot_samples) {
            return Err(Error::Config(
                "max_samples_per_level below the pilot size".into(),
            ));
        }
        if self.max_rounds == 0 {
            return Err(Error::Config("max_rounds must be positive".into()));
        }
        Ok(())
    }
}

/// One realization evaluated on a level and (for level > 0) the next coarser one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSample {
    pub fine: f64,
    pub coarse: Option<f64>,
    pub cost_seconds: f64,
}

/// A QoI evaluator over (sample index, level). The same index must map to
/// the same realization on every level.
pub trait LevelModel: Sync {
    fn levels(&self) -> &[LevelSpec];

    fn evaluate_pair(&self, index: u64, level: usize) -> Result<PairSample>;
}

/// Generated realizations pushed through a QoI evaluator.
pub struct GeneratorModel {
    pub generator: Generator,
    pub setup: ElasticitySetup,
    pub kind: QoiKind,
    pub levels: Vec<LevelSpec>,
}

impl GeneratorModel {
    pub fn new(
        generator: Generator,
        setup: ElasticitySetup,
        kind: QoiKind,
        max_level: usize,
    ) -> Result<Self> {
        let levels = LevelSpec::hierarchy(generator.sampler().dims(), max_level)?;
        Ok(GeneratorModel {
            generator,
            setup,
            kind,
            levels,
        })
    }
}

impl LevelModel for GeneratorModel {
    fn levels(&self) -> &[LevelSpec] {
        &self.levels
    }

    fn evaluate_pair(&self, index: u64, level: usize) -> Result<PairSample> {
        let start = std::time::Instant::now();
        let grid = self.generator.realize(index);
        let fine = evaluate_qoi(&grid, &self.setup, &self.levels[level], self.kind)?.value;
        let coarse = if level > 0 {
            Some(evaluate_qoi(&grid, &self.setup, &self.levels[level - 1], self.kind)?.value)
        } else {
            None
        };
        Ok(PairSample {
            fine,
            coarse,
            cost_seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Mean-square error split into squared bias and estimator variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseSplit {
    pub bias_sq: f64,
    pub statistical: f64,
}

impl MseSplit {
    pub fn total(&self) -> f64 {
        self.bias_sq + self.statistical
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimates {
    pub mean: f64,
    pub variance: f64,
    pub std: f64,
    pub skewness: Option<f64>,
    pub kurtosis: Option<f64>,
    pub mse_mean: MseSplit,
    pub mse_variance: MseSplit,
    pub rel_tol: f64,
    pub max_level: usize,
    pub levels: Vec<LevelStats>,
    pub screening: Option<ScreeningFit>,
    /// The requested tolerance was out of reach below the level cap.
    pub tolerance_unreachable: bool,
    /// The per-level sample budget cut the plan short.
    pub budget_exhausted: bool,
    pub rounds: usize,
}

impl MomentEstimates {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("estimates serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Moments and MSE split from complete ensembles.
pub fn estimate_moments(
    ensembles: &[LevelEnsemble],
    levels: &[LevelSpec],
) -> Result<(
    f64,
    f64,
    Option<f64>,
    Option<f64>,
    MseSplit,
    MseSplit,
    Vec<LevelStats>,
)> {
    let stats = level_stats(ensembles, levels)?;
    let mean = mlmc_mean(ensembles)?;
    let m2 = mlmc_central_moment(ensembles, 2)?;
    let enough = ensembles.iter().all(|e| e.len() >= 4);
    let (skew, kurt) = if enough && m2 > 0.0 {
        let m3 = mlmc_central_moment(ensembles, 3)?;
        let m4 = mlmc_central_moment(ensembles, 4)?;
        (Some(m3 / m2.powf(1.5)), Some(m4 / (m2 * m2)))
    } else {
        (None, None)
    };
    let top = stats.last().expect("nonempty");
    let bias_of = |v: f64| if top.level >= 1 { v * v } else { 0.0 };
    let mse_mean = MseSplit {
        bias_sq: bias_of(top.mean_delta),
        statistical: stats.iter().map(|s| s.var_delta / s.samples as f64).sum(),
    };
    let mse_variance = MseSplit {
        bias_sq: bias_of(top.delta_h2),
        statistical: stats
            .iter()
            .map(|s| s.var_delta_h2 / s.samples as f64)
            .sum(),
    };
    Ok((mean, m2, skew, kurt, mse_mean, mse_variance, stats))
}

fn draw<M: LevelModel + ?Sized>(
    model: &M,
    ens: &mut LevelEnsemble,
    upto: usize,
    mode: CostMode,
) -> Result<()> {
    let level = ens.level;
    let start = ens.len();
    if upto <= start {
        return Ok(());
    }
    let levels = model.levels();
    let nominal = levels[level].dofs as f64
        + if level > 0 {
            levels[level - 1].dofs as f64
        } else {
            0.0
        };
    let new: Vec<(u64, PairSample)> = (start..upto)
        .into_par_iter()
        .map(|i| {
            let idx = sample_index(level, i as u64);
            model.evaluate_pair(idx, level).map(|p| (idx, p))
        })
        .collect::<Result<_>>()?;
    for (idx, p) in new {
        ens.indices.push(idx);
        ens.fine.push(p.fine);
        if let Some(c) = ens.coarse.as_mut() {
            c.push(p.coarse.ok_or_else(|| {
                Error::Shape(format!("model gave no coarse value at level {level}"))
            })?);
        }
        ens.costs.push(match mode {
            CostMode::Measured => p.cost_seconds,
            CostMode::Nominal => nominal,
        });
    }
    Ok(())
}

fn empty_ensemble(level: usize) -> LevelEnsemble {
    LevelEnsemble {
        level,
        indices: vec![],
        fine: vec![],
        coarse: if level > 0 { Some(vec![]) } else { None },
        costs: vec![],
    }
}

/// Pilot, screen, plan, top up, estimate.
pub fn run<M: LevelModel + ?Sized>(model: &M, config: &MlmcConfig) -> Result<MomentEstimates> {
    run_detailed(model, config).map(|(est, _)| est)
}

/// [`run`], also returning the sampled ensembles.
pub fn run_detailed<M: LevelModel + ?Sized>(
    model: &M,
    config: &MlmcConfig,
) -> Result<(MomentEstimates, Vec<LevelEnsemble>)> {
    config.validate()?;
    let levels = model.levels();
    if levels.len() <= config.max_level {
        return Err(Error::Config(format!(
            "model offers {} levels, max_level is {}",
            levels.len(),
            config.max_level
        )));
    }
    let levels = &levels[..=config.max_level];
    let mut ensembles: Vec<LevelEnsemble> = (0..=config.pilot_levels).map(empty_ensemble).collect();
    for e in ensembles.iter_mut() {
        draw(
            model,
            e,
            config.pilot_samples.max(MIN_SAMPLES),
            config.cost_mode,
        )?;
    }

    let mut tolerance_unreachable = false;
    let mut budget_exhausted = false;
    let mut screening_fit = None;
    let mut rounds = 0;
    while rounds < config.max_rounds {
        rounds += 1;
        let stats = level_stats(&ensembles, levels)?;
        let fit = screening(&stats)?;
        let drawn: Vec<usize> = ensembles.iter().map(LevelEnsemble::len).collect();
        let mean = mlmc_mean(&ensembles)?;
        let mut make = |target: PlanTarget, estimate: f64| -> Result<Plan> {
            match plan(
                &fit,
                &stats,
                levels,
                config.rel_tol,
                estimate,
                &drawn,
                target,
            ) {
                Err(Error::ToleranceUnreachable { .. }) => {
                    // Settle for the finest allowed level; samples still cover the variance part.
                    tolerance_unreachable = true;
                    let mut capped = fit.clone();
                    match target {
                        PlanTarget::Mean => capped.bias_mean = None,
                        PlanTarget::Variance => capped.bias_var = None,
                    }
                    let top = levels.len() - 1;
                    plan_at_level(
                        &capped,
                        &stats,
                        levels,
                        config.rel_tol,
                        estimate,
                        &drawn,
                        target,
                        top,
                    )
                }
                other => other,
            }
        };
        let mut p = make(PlanTarget::Mean, mean)?;
        if config.plan_variance {
            let m2 = mlmc_central_moment(&ensembles, 2)?;
            if m2 > 0.0 {
                p = combine_plans(&p, &make(PlanTarget::Variance, m2)?);
            }
        }
        screening_fit = Some(fit);
        while ensembles.len() <= p.max_level {
            ensembles.push(empty_ensemble(ensembles.len()));
        }
        let mut more = false;
        for (l, e) in ensembles.iter_mut().enumerate() {
            let mut want = p.samples.get(l).copied().unwrap_or(0).max(MIN_SAMPLES);
            if want > config.max_samples_per_level {
                want = config.max_samples_per_level;
                budget_exhausted = true;
            }
            if want > e.len() {
                more = true;
                draw(model, e, want, config.cost_mode)?;
            }
        }
        if !more {
            break;
        }
    }

    let (mean, variance, skewness, kurtosis, mse_mean, mse_variance, stats) =
        estimate_moments(&ensembles, levels)?;
    let est = MomentEstimates {
        mean,
        variance,
        std: variance.max(0.0).sqrt(),
        skewness,
        kurtosis,
        mse_mean,
        mse_variance,
        rel_tol: config.rel_tol,
        max_level: ensembles.len() - 1,
        levels: stats,
        screening: screening_fit,
        tolerance_unreachable,
        budget_exhausted,
        rounds,
    };
    Ok((est, ensembles))
}

/// Sample plan with the finest level forced to `level`.
#[allow(clippy::too_many_arguments)]
fn plan_at_level(
    fit: &ScreeningFit,
    stats: &[LevelStats],
    levels: &[LevelSpec],
    rel_tol: f64,
    estimate: f64,
    drawn: &[usize],
    target: PlanTarget,
    level: usize,
) -> Result<Plan> {
    let mut padded: Vec<LevelStats> = stats.iter().take(level + 1).cloned().collect();
    // Extra levels enter with no observations; plan() then extrapolates them.
    while padded.len() <= level {
        let l = padded.len();
        padded.push(LevelStats {
            level: l,
            dofs: levels[l].dofs,
            samples: 0,
            mean_delta: 0.0,
            var_delta: 0.0,
            cost: 0.0,
            delta_h2: 0.0,
            var_delta_h2: 0.0,
        });
    }
    plan(fit, &padded, levels, rel_tol, estimate, drawn, target)
}

/// Rebuilds per-level ensembles from QoI records. The sample level is read
/// from the index; its fine value is the record at that level and the coarse
/// value the record one level below.
pub fn ensembles_from_records(records: &[QoiRecord]) -> Result<Vec<LevelEnsemble>> {
    use std::collections::BTreeMap;
    let mut by_index: BTreeMap<u64, BTreeMap<usize, (f64, f64)>> = BTreeMap::new();
    for r in records {
        let slot = by_index.entry(r.index).or_default();
        if slot.insert(r.level, (r.value, r.cost_seconds)).is_some() {
            return Err(Error::Format(format!(
                "duplicate record for index {} level {}",
                r.index, r.level
            )));
        }
    }
    let mut ensembles: Vec<LevelEnsemble> = Vec::new();
    for (index, vals) in by_index {
        let level = (index >> INDEX_SHIFT) as usize;
        while ensembles.len() <= level {
            ensembles.push(empty_ensemble(ensembles.len()));
        }
        let (fine, cf) = *vals.get(&level).ok_or_else(|| {
            Error::Format(format!("index {index} lacks its level-{level} record"))
        })?;
        let e = &mut ensembles[level];
        e.indices.push(index);
        e.fine.push(fine);
        let mut cost = cf;
        if level > 0 {
            let (coarse, cc) = *vals.get(&(level - 1)).ok_or_else(|| {
                Error::Format(format!(
                    "index {index} lacks its level-{} record",
                    level - 1
                ))
            })?;
            e.coarse
                .as_mut()
                .expect("coarse present above level 0")
                .push(coarse);
            cost += cc;
        }
        e.costs.push(cost);
    }
    if let Some(e) = ensembles.iter().find(|e| e.is_empty()) {
        return Err(Error::Format(format!("no samples for level {}", e.level)));
    }
    Ok(ensembles)
}

/// Flattens ensembles into QoI records (one per evaluated level).
pub fn records_from_ensembles(ensembles: &[LevelEnsemble], kind: QoiKind) -> Vec<QoiRecord> {
    let mut out = Vec::new();
    for e in ensembles {
        for i in 0..e.len() {
            out.push(QoiRecord {
                index: e.indices[i],
                level: e.level,
                kind,
                value: e.fine[i],
                cost_seconds: e.costs[i],
            });
            if let Some(c) = &e.coarse {
                out.push(QoiRecord {
                    index: e.indices[i],
                    level: e.level - 1,
                    kind,
                    value: c[i],
                    cost_seconds: 0.0,
                });
            }
        }
    }
    out
}
