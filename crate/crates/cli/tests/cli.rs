use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use voxrf::generate::{read_manifest, Generator};
use voxrf::identify::{AxisFit, ThresholdField};
use voxrf::voxelgrid::{load_volume, save_volume};
use voxrf::{Dims, KernelParams, UnitCellLayout};

fn voxrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxrf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = voxrf(args);
    assert!(
        out.status.success(),
        "voxrf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const CELL: usize = 16;
const TRUE_LENGTH: f64 = 3.0;

/// A tiled specimen drawn from a known exponential kernel with a radial
/// threshold pattern, written as `lattice.toml` / `lattice.raw`.
fn fixture(dir: &Path, cells_per_side: usize) {
    let cell = Dims::new(CELL, CELL, 1);
    let grid = Dims::new(CELL * cells_per_side, CELL * cells_per_side, 1);
    let c = (CELL as f64 - 1.0) / 2.0;
    let d: Vec<f64> = (0..cell.len())
        .map(|idx| {
            let [i, j, _] = cell.coords(idx);
            let r = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt() / c;
            -0.8 + 0.9 * r
        })
        .collect();
    let th = ThresholdField::new(cell, d).unwrap();
    let params = KernelParams::isotropic_matern(TRUE_LENGTH, 0.5).unwrap();
    let layout = UnitCellLayout::new(cell, grid).unwrap();
    let g = Generator::new(&params, &th, &layout, 11).unwrap().realize(0);
    save_volume(&g, dir.join("lattice.toml"), dir.join("lattice.raw")).unwrap();
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"output_dir = "run"

[input]
volume_meta = "lattice.toml"
volume_raw = "lattice.raw"
cell_dims = [{CELL}, {CELL}, 1]

[identify]
lags = [8, 8, 0]
fit_mode = "matern"
{extra}"#
    );
    let p = dir.join("pipeline.toml");
    fs::write(&p, text).unwrap();
    p
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn identify_recovers_fixture_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    fixture(tmp.path(), 24);
    let cfg = config(tmp.path(), "lag_study = [4, 6]\n");
    let cfg = cfg.to_str().unwrap();
    run_ok(&["identify", cfg]);
    let dir = tmp.path().join("run/identify");
    for f in [
        "mean.json",
        "threshold.json",
        "cov_x.csv",
        "cov_y.csv",
        "cov_x.json",
        "fit_x.json",
        "fit_y.json",
        "kernel.json",
        "provenance.json",
        "lag_study_x.csv",
    ] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    assert!(!dir.join("fit_z.json").exists());
    let csv = fs::read_to_string(dir.join("cov_x.csv")).unwrap();
    assert!(csv.starts_with("lag,d_i,d_j,gamma_hat\n"));
    for axis in ["x", "y"] {
        let fit = AxisFit::from_json(&fs::read_to_string(dir.join(format!("fit_{axis}.json"))).unwrap())
            .unwrap();
        assert!(
            (fit.length - TRUE_LENGTH).abs() < 0.25 * TRUE_LENGTH,
            "axis {axis}: length {}",
            fit.length
        );
        let nu = fit.smoothness.unwrap();
        assert!((nu - 0.5).abs() < 0.25, "axis {axis}: nu {nu}");
    }

    let first = tree(&dir);
    run_ok(&["identify", cfg]);
    assert_eq!(tree(&dir), first);
}

#[test]
fn layout_and_config_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    fixture(tmp.path(), 2);
    let bad = config(tmp.path(), "").to_str().unwrap().to_string();
    let text = fs::read_to_string(&bad).unwrap().replace("cell_dims = [16, 16, 1]", "cell_dims = [15, 16, 1]");
    fs::write(&bad, text).unwrap();
    let out = voxrf(&["identify", &bad]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("layout"));

    assert_eq!(voxrf(&["identify", "/nonexistent/p.toml"]).status.code(), Some(2));
    fs::write(&bad, "output_dir = 3\n").unwrap();
    assert_eq!(voxrf(&["identify", &bad]).status.code(), Some(2));
    assert_eq!(voxrf(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn generate_needs_fit_records() {
    let tmp = TempDir::new().unwrap();
    fixture(tmp.path(), 2);
    let cfg = config(tmp.path(), "\n[generate]\ncount = 2\nseed = 1\n");
    let out = voxrf(&["generate", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fit records"));
}

#[test]
fn generate_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    fixture(tmp.path(), 6);
    let cfg = config(tmp.path(), "\n[generate]\ncount = 2\nseed = 5\nhistogram_bins = 4\n");
    let cfg = cfg.to_str().unwrap();
    run_ok(&["identify", cfg]);
    run_ok(&["generate", cfg]);
    let dir = tmp.path().join("run/generate");
    let rows = read_manifest(&fs::read_to_string(dir.join("manifest.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.seed == 5));
    let v1 = load_volume(dir.join("volumes/real_000001.toml"), dir.join("volumes/real_000001.raw"))
        .unwrap();
    assert_eq!(v1.dims(), Dims::new(96, 96, 1));
    assert_eq!(v1.porosity(), rows[1].porosity);
    let hist = fs::read_to_string(dir.join("porosity_histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 5);
    let summary = fs::read_to_string(dir.join("summary.json")).unwrap();
    assert!(summary.contains("config_hash"));

    let first = tree(&dir);
    run_ok(&["generate", cfg]);
    assert_eq!(tree(&dir), first);
}

/// Hand-written model records: all thresholds at minus infinity.
fn all_material_model(dir: &Path) {
    let id = dir.join("run/identify");
    fs::create_dir_all(&id).unwrap();
    let cell = Dims::new(4, 4, 1);
    let th = ThresholdField::constant(cell, f64::NEG_INFINITY).unwrap();
    fs::write(id.join("threshold.json"), th.to_json()).unwrap();
    fs::write(
        id.join("kernel.json"),
        r#"{"cell_dims":[4,4,1],
            "params":{"lengths":[2.0,2.0,1.0],
                      "smoothness":[{"matern":0.5},{"matern":0.5},{"matern":0.5}]},
            "fitted":[true,true,false],"flagged":[false,false,false]}"#,
    )
    .unwrap();
}

fn model_only_config(dir: &Path, body: &str) -> String {
    let p = dir.join("model.toml");
    fs::write(
        &p,
        format!("output_dir = \"run\"\n\n[input]\ncell_dims = [4, 4, 1]\n{body}"),
    )
    .unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn minus_infinity_thresholds_give_solid_volumes() {
    let tmp = TempDir::new().unwrap();
    all_material_model(tmp.path());
    let cfg = model_only_config(
        tmp.path(),
        "\n[generate]\ncount = 3\nseed = 2\ngrid_dims = [16, 8, 1]\n",
    );
    run_ok(&["generate", &cfg]);
    let dir = tmp.path().join("run/generate");
    let rows = read_manifest(&fs::read_to_string(dir.join("manifest.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.porosity == 0.0));
    let v = load_volume(dir.join("volumes/real_000002.toml"), dir.join("volumes/real_000002.raw"))
        .unwrap();
    assert!(v.as_bytes().iter().all(|&b| b == 1));
}

#[test]
fn generate_without_grid_dims_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    all_material_model(tmp.path());
    let cfg = model_only_config(tmp.path(), "\n[generate]\ncount = 1\nseed = 2\n");
    assert_eq!(voxrf(&["generate", &cfg]).status.code(), Some(2));
}

#[test]
fn degenerate_uq_collapses_intervals() {
    let tmp = TempDir::new().unwrap();
    all_material_model(tmp.path());
    let cfg = model_only_config(
        tmp.path(),
        r#"
[generate]
count = 1
seed = 2
grid_dims = [16, 16, 1]

[qoi]
kind = "porosity"

[qoi.elasticity]
e_material = 1.0
"#,
    );
    run_ok(&["uq", &cfg]);
    let dir = tmp.path().join("run/uq");
    let res: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("results.json")).unwrap()).unwrap();
    assert_eq!(res["estimates"]["mean"].as_f64().unwrap(), 0.0);
    assert_eq!(res["estimates"]["std"].as_f64().unwrap(), 0.0);
    let iv = fs::read_to_string(dir.join("intervals.csv")).unwrap();
    for line in iv.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!((f[1], f[2]), (0.0, 0.0));
    }
}

#[test]
fn porosity_uq_meets_its_tolerance_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    fixture(tmp.path(), 4);
    let cfg = config(
        tmp.path(),
        r#"
[generate]
count = 1
seed = 3

[qoi]
kind = "porosity"

[qoi.elasticity]
e_material = 1.0

[mlmc]
rel_tol = 0.05
pilot_levels = 3
pilot_samples = 20
max_level = 4
seed = 3
cost_mode = "nominal"
plan_variance = false
"#,
    );
    let cfg = cfg.to_str().unwrap();
    run_ok(&["identify", cfg]);
    run_ok(&["uq", cfg]);
    let dir = tmp.path().join("run/uq");
    let res: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("results.json")).unwrap()).unwrap();
    let est = &res["estimates"];
    let mean = est["mean"].as_f64().unwrap();
    let stat = est["mse_mean"]["statistical"].as_f64().unwrap();
    assert!(mean > 0.0 && mean < 1.0);
    assert!(stat.sqrt() <= 0.05 * mean, "statistical error {} vs mean {mean}", stat.sqrt());
    for f in ["levels.csv", "intervals.csv", "samples.csv", "provenance.json"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let first = tree(&dir);
    run_ok(&["uq", cfg]);
    assert_eq!(tree(&dir), first);
}

#[test]
fn solve_and_inspect_report_json() {
    let tmp = TempDir::new().unwrap();
    fixture(tmp.path(), 2);
    let meta = tmp.path().join("lattice.toml");
    let raw = tmp.path().join("lattice.raw");
    let (meta, raw) = (meta.to_str().unwrap(), raw.to_str().unwrap());
    let grid = load_volume(meta, raw).unwrap();

    let out = run_ok(&["inspect", "--meta", meta, "--raw", raw, "--cell-dims", "16x16x1"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["porosity"].as_f64().unwrap(), grid.porosity());
    assert_eq!(v["cells"]["n_cells"].as_u64().unwrap(), 4);
    let bad = voxrf(&["inspect", "--meta", meta, "--raw", raw, "--cell-dims", "5x16x1"]);
    assert_eq!(bad.status.code(), Some(2));

    let out = run_ok(&["solve", "--meta", meta, "--raw", raw, "--kind", "porosity", "--factor", "2"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["dims"], serde_json::json!([16, 16, 1]));

    let out = run_ok(&["solve", "--meta", meta, "--raw", raw, "--e-material", "200", "--factor", "4"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let e = v["value"].as_f64().unwrap();
    assert!(e > 0.0 && e < 200.0, "modulus {e}");
    assert!(v["iterations"].as_u64().unwrap() > 0);
    assert_eq!(voxrf(&["solve", "--meta", meta, "--raw", raw, "--poisson", "0.7"]).status.code(), Some(2));
}
