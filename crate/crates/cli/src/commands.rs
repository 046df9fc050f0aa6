//! Pipeline stages. Each stage owns one subdirectory of the output dir and
//! rewrites it from scratch, so reruns with the same config are byte-identical.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voxrf::config::PipelineConfig;
use voxrf::generate::{write_manifest, Generator, ManifestRow};
use voxrf::identify::{
    estimate_binary_cov, estimate_mean_field, fit_axis, lag_convergence_study, mean_to_threshold,
    AxisFit, ThresholdField,
};
use voxrf::mlmc::{
    records_from_ensembles, run_detailed, write_intervals_csv, write_levels_csv, GeneratorModel,
    MomentEstimates,
};
use voxrf::qoi::{coarsen, solve_homogenized_e_with, ElasticitySetup, QoiKind, SolverOptions};
use voxrf::voxelgrid::{extract_cells, load_volume, save_volume, VolumeMeta};
use voxrf::{Axis, Dims, Error, KernelParams, Result, Smoothness, UnitCellLayout, VoxelGrid};

/// Correlation assumed on axes that were not fitted (cell extent 1).
const SKIPPED_LENGTH: f64 = 1.0;
const SKIPPED_NU: f64 = 0.5;

struct Run {
    cfg: PipelineConfig,
    hash: String,
}

/// Parses the config, hashes its canonical form (before path resolution, so
/// the hash does not depend on where the run directory lives) and resolves
/// relative paths against the config's directory.
fn load(path: &Path) -> Result<Run> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = PipelineConfig::parse(&text)?;
    let hash = hex::encode(Sha256::digest(cfg.to_toml().as_bytes()));
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(Run { cfg, hash })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn fresh_dir(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| io_err(path, e))?;
    }
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn read(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::InvalidParameter(format!("missing {what} at {}: {e}", path.display()))
    })
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn input_paths(cfg: &PipelineConfig) -> Option<(&Path, &Path)> {
    Some((cfg.input.volume_meta.as_deref()?, cfg.input.volume_raw.as_deref()?))
}

fn input_meta(cfg: &PipelineConfig) -> Result<Option<VolumeMeta>> {
    match input_paths(cfg) {
        Some((meta, _)) => {
            let text = fs::read_to_string(meta)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", meta.display())))?;
            Ok(Some(VolumeMeta::parse(&text)?))
        }
        None => Ok(None),
    }
}

/// Kernel record shared by `identify`, `generate` and `uq`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRecord {
    pub cell_dims: Dims,
    pub params: KernelParams,
    pub fitted: [bool; 3],
    /// Fit poorly conditioned or pinned at a bound.
    pub flagged: [bool; 3],
    /// The lag study saw the length grow at every step (flat objective).
    #[serde(default)]
    pub grows_with_lags: [bool; 3],
}

#[derive(Serialize)]
struct Provenance<'a> {
    stage: &'a str,
    config_hash: &'a str,
    version: &'a str,
}

fn provenance(dir: &Path, stage: &str, hash: &str) -> Result<()> {
    let p = Provenance {
        stage,
        config_hash: hash,
        version: env!("CARGO_PKG_VERSION"),
    };
    write(&dir.join("provenance.json"), json(&p))
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("record serializes");
    s.push('\n');
    s
}

pub fn identify(config: &Path) -> Result<()> {
    let Run { cfg, hash } = load(config)?;
    let (meta, raw) = input_paths(&cfg)
        .ok_or_else(|| Error::Config("identify needs input.volume_meta and volume_raw".into()))?;
    for p in [meta, raw] {
        if !p.exists() {
            return Err(Error::Config(format!("input {} does not exist", p.display())));
        }
    }
    let grid = load_volume(meta, raw)?;
    let cell_dims = cfg.input.cell_dims;
    let layout = UnitCellLayout::new(cell_dims, grid.dims())?;
    for axis in Axis::ALL {
        let a = axis.index();
        if cfg.identify.lags[a] == 0 && cell_dims.0[a] > 1 {
            return Err(Error::Config(format!(
                "axis {} has cell extent {} and needs a positive lag count",
                axis.name(),
                cell_dims.0[a]
            )));
        }
    }
    let cells = extract_cells(&grid, &layout)?;

    let dir = cfg.output_dir.join("identify");
    fresh_dir(&dir)?;
    let mean = estimate_mean_field(&cells)?;
    let threshold = mean_to_threshold(&mean);
    write(&dir.join("mean.json"), mean.to_json())?;
    write(&dir.join("threshold.json"), threshold.to_json())?;

    let mut lengths = [SKIPPED_LENGTH; 3];
    let mut smoothness = [Smoothness::Matern(SKIPPED_NU); 3];
    let mut fitted = [false; 3];
    let mut flagged = [false; 3];
    let mut grows_with_lags = [false; 3];
    for axis in Axis::ALL {
        let a = axis.index();
        let n_lags = cfg.identify.lags[a];
        if n_lags == 0 {
            continue;
        }
        let name = axis.name();
        let set = estimate_binary_cov(&cells, &mean, axis, n_lags)?;
        write(&dir.join(format!("cov_{name}.csv")), csv_bytes(|b| set.write_csv(b))?)?;
        write(&dir.join(format!("cov_{name}.json")), set.to_json())?;
        let fit = fit_axis(&set, cfg.identify.fit_mode)?;
        if fit.flagged() {
            eprintln!(
                "warning: axis {name} fit is poorly determined (condition {:.3e}, at bound {})",
                fit.condition_number, fit.at_bound
            );
        }
        write(&dir.join(format!("fit_{name}.json")), fit.to_json())?;
        lengths[a] = fit.length;
        smoothness[a] = fit.smoothness_param();
        fitted[a] = true;
        flagged[a] = fit.flagged();

        let study: Vec<usize> = cfg
            .identify
            .lag_study
            .iter()
            .copied()
            .filter(|&n| n > 0 && n < cell_dims.0[a])
            .collect();
        if !study.is_empty() {
            let s = lag_convergence_study(&cells, &mean, axis, &study, cfg.identify.fit_mode)?;
            write(&dir.join(format!("lag_study_{name}.csv")), lag_study_csv(&s.fits)?)?;
            grows_with_lags[a] = s.length_keeps_growing;
            if s.length_keeps_growing {
                eprintln!("warning: axis {name} length grows with every lag count");
            }
        }
    }
    let record = KernelRecord {
        cell_dims,
        params: KernelParams::new(lengths, smoothness)?,
        fitted,
        flagged,
        grows_with_lags,
    };
    write(&dir.join("kernel.json"), json(&record))?;
    provenance(&dir, "identify", &hash)
}

fn lag_study_csv(fits: &[AxisFit]) -> Result<Vec<u8>> {
    csv_bytes(|b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record([
            "n_lags",
            "length",
            "length_std",
            "smoothness",
            "smoothness_std",
            "residual",
            "condition_number",
            "flagged",
        ])?;
        for f in fits {
            w.serialize((
                f.n_lags,
                f.length,
                f.length_std,
                f.smoothness,
                f.smoothness_std,
                f.residual,
                f.condition_number,
                f.flagged(),
            ))?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    })
}

/// Identified model plus the specimen geometry to sample on.
struct Model {
    generator: Generator,
    spacing: [f64; 3],
}

fn load_model(cfg: &PipelineConfig, seed: u64) -> Result<Model> {
    let dir = cfg.output_dir.join("identify");
    let kernel: KernelRecord = serde_json::from_str(&read(&dir.join("kernel.json"), "fit records")?)?;
    kernel.params.validate()?;
    let threshold = ThresholdField::from_json(&read(&dir.join("threshold.json"), "thresholds")?)?;
    let meta = input_meta(cfg)?;
    let grid_dims = match (cfg.generate.grid_dims, &meta) {
        (Some(d), _) => d,
        (None, Some(m)) => m.grid_dims(),
        (None, None) => {
            return Err(Error::Config(
                "generate.grid_dims is required when no input volume is configured".into(),
            ))
        }
    };
    let spacing = meta.map_or([1.0; 3], |m| m.spacing);
    let layout = UnitCellLayout::new(kernel.cell_dims, grid_dims)?;
    let generator = Generator::new(&kernel.params, &threshold, &layout, seed)?;
    Ok(Model { generator, spacing })
}

#[derive(Serialize)]
struct HistogramBin {
    lower: f64,
    upper: f64,
    count: usize,
}

/// Equal-width bins over the observed range.
fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return Vec::new();
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| HistogramBin {
            lower: lo + b as f64 * width,
            upper: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            count,
        })
        .collect()
}

#[derive(Serialize)]
struct GenerateSummary<'a> {
    config_hash: &'a str,
    seed: u64,
    count: usize,
    grid_dims: Dims,
    max_nugget: f64,
    porosity_mean: f64,
    porosity_std: f64,
}

pub fn generate(config: &Path) -> Result<()> {
    let Run { cfg, hash } = load(config)?;
    let g = &cfg.generate;
    let model = load_model(&cfg, g.seed)?;
    let dir = cfg.output_dir.join("generate");
    fresh_dir(&dir)?;
    let vol_dir = dir.join("volumes");
    if g.write_volumes {
        fs::create_dir_all(&vol_dir).map_err(|e| io_err(&vol_dir, e))?;
    }
    let rows: Vec<ManifestRow> = (0..g.count as u64)
        .into_par_iter()
        .map(|index| {
            let grid = model.generator.realize(index).with_spacing(model.spacing)?;
            if g.write_volumes {
                let stem = vol_dir.join(format!("real_{index:06}"));
                save_volume(&grid, stem.with_extension("toml"), stem.with_extension("raw"))?;
            }
            Ok(model.generator.manifest_row(index, &grid))
        })
        .collect::<Result<_>>()?;
    write(&dir.join("manifest.csv"), csv_bytes(|b| write_manifest(&rows, b))?)?;

    let por: Vec<f64> = rows.iter().map(|r| r.porosity).collect();
    let hist = histogram(&por, g.histogram_bins);
    write(
        &dir.join("porosity_histogram.csv"),
        csv_bytes(|b| {
            let mut w = csv::Writer::from_writer(b);
            if hist.is_empty() {
                w.write_record(["lower", "upper", "count"])?;
            }
            for h in &hist {
                w.serialize(h)?;
            }
            w.flush().map_err(|e| Error::Format(e.to_string()))
        })?,
    )?;
    let (mean, std) = mean_std(&por);
    let summary = GenerateSummary {
        config_hash: &hash,
        seed: g.seed,
        count: g.count,
        grid_dims: model.generator.sampler().dims(),
        max_nugget: model.generator.sampler().max_nugget(),
        porosity_mean: mean,
        porosity_std: std,
    };
    write(&dir.join("summary.json"), json(&summary))?;
    provenance(&dir, "generate", &hash)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[derive(Serialize)]
struct UqResults<'a> {
    config_hash: &'a str,
    qoi: QoiKind,
    /// Tolerance or budget could not be honoured; estimates are still reported.
    partial: bool,
    estimates: &'a MomentEstimates,
}

#[derive(Serialize)]
struct UqFailure<'a> {
    config_hash: &'a str,
    partial: bool,
    error: String,
}

pub fn uq(config: &Path) -> Result<()> {
    let Run { cfg, hash } = load(config)?;
    let mlmc = cfg.mlmc_or_default();
    let model = load_model(&cfg, mlmc.seed)?;
    let dims = model.generator.sampler().dims();
    let gm = GeneratorModel::new(model.generator, cfg.qoi.elasticity, cfg.qoi.kind, mlmc.max_level)
        .map_err(|e| match e {
            Error::Shape(m) => Error::Config(format!("level hierarchy on {dims}: {m}")),
            other => other,
        })?;
    let dir = cfg.output_dir.join("uq");
    fresh_dir(&dir)?;
    let (est, ensembles) = match run_detailed(&gm, &mlmc) {
        Ok(r) => r,
        Err(e) => {
            let f = UqFailure {
                config_hash: &hash,
                partial: true,
                error: e.to_string(),
            };
            write(&dir.join("results.json"), json(&f))?;
            return Err(e);
        }
    };
    let partial = est.tolerance_unreachable || est.budget_exhausted;
    if est.tolerance_unreachable {
        eprintln!("warning: requested tolerance unreachable below the level cap");
    }
    if est.budget_exhausted {
        eprintln!("warning: per-level sample budget exhausted");
    }
    let res = UqResults {
        config_hash: &hash,
        qoi: cfg.qoi.kind,
        partial,
        estimates: &est,
    };
    write(&dir.join("results.json"), json(&res))?;
    write(&dir.join("levels.csv"), csv_bytes(|b| write_levels_csv(&est, b))?)?;
    write(&dir.join("intervals.csv"), csv_bytes(|b| write_intervals_csv(&est, b))?)?;
    let records = records_from_ensembles(&ensembles, cfg.qoi.kind);
    write(
        &dir.join("samples.csv"),
        csv_bytes(|b| voxrf::qoi::write_records(&records, b))?,
    )?;
    provenance(&dir, "uq", &hash)
}

#[derive(Serialize)]
struct SolveReport {
    kind: QoiKind,
    value: f64,
    dims: Dims,
    factor: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rel_residual: Option<f64>,
}

pub fn solve(
    meta: &Path,
    raw: &Path,
    kind: QoiKind,
    setup: &ElasticitySetup,
    factor: usize,
    rel_tol: f64,
) -> Result<()> {
    setup.validate().map_err(|e| Error::Config(e.to_string()))?;
    let grid = coarsen(&load_volume(meta, raw)?, factor)?;
    let report = match kind {
        QoiKind::Porosity => SolveReport {
            kind,
            value: grid.porosity(),
            dims: grid.dims(),
            factor,
            iterations: None,
            rel_residual: None,
        },
        QoiKind::YoungsModulus => {
            let opts = SolverOptions {
                rel_tol,
                ..SolverOptions::default()
            };
            let sol = solve_homogenized_e_with(&grid, setup, &opts)?;
            SolveReport {
                kind,
                value: sol.modulus,
                dims: grid.dims(),
                factor,
                iterations: Some(sol.iterations),
                rel_residual: Some(sol.rel_residual),
            }
        }
    };
    print!("{}", json(&report));
    Ok(())
}

#[derive(Serialize)]
struct CellStats {
    cell_dims: Dims,
    n_cells: usize,
    porosity_mean: f64,
    porosity_std: f64,
    porosity_min: f64,
    porosity_max: f64,
    /// Voxel positions that are material in every cell or in none.
    deterministic_fraction: f64,
}

#[derive(Serialize)]
struct InspectReport {
    dims: Dims,
    spacing: [f64; 3],
    voxels: usize,
    material: usize,
    porosity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    cells: Option<CellStats>,
}

pub fn inspect(meta: &Path, raw: &Path, cell_dims: Option<Dims>) -> Result<()> {
    let grid = load_volume(meta, raw)?;
    let cells = cell_dims.map(|cd| cell_stats(&grid, cd)).transpose()?;
    let report = InspectReport {
        dims: grid.dims(),
        spacing: grid.spacing(),
        voxels: grid.len(),
        material: grid.material_count(),
        porosity: grid.porosity(),
        cells,
    };
    print!("{}", json(&report));
    Ok(())
}

fn cell_stats(grid: &VoxelGrid, cell_dims: Dims) -> Result<CellStats> {
    let layout = UnitCellLayout::new(cell_dims, grid.dims())?;
    let cells = extract_cells(grid, &layout)?;
    let por: Vec<f64> = cells.iter().map(VoxelGrid::porosity).collect();
    let (m, s) = mean_std(&por);
    let mut sums = vec![0usize; cell_dims.len()];
    for c in &cells {
        for (acc, &v) in sums.iter_mut().zip(c.as_bytes()) {
            *acc += usize::from(v);
        }
    }
    let fixed = sums.iter().filter(|&&s| s == 0 || s == cells.len()).count();
    Ok(CellStats {
        cell_dims,
        n_cells: cells.len(),
        porosity_mean: m,
        porosity_std: s,
        porosity_min: por.iter().copied().fold(f64::INFINITY, f64::min),
        porosity_max: por.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        deterministic_fraction: fixed as f64 / cell_dims.len() as f64,
    })
}
