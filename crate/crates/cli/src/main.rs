//! `voxrf` command-line pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use voxrf::field::Axis;
use voxrf::qoi::QoiKind;
use voxrf::{Dims, Error};

#[derive(Debug, Parser)]
#[command(name = "voxrf", version, about = "Binary random field models of voxel lattices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate mean, thresholds and per-axis kernel fits from a segmented volume.
    Identify {
        /// Pipeline config (TOML).
        config: PathBuf,
    },
    /// Sample realizations from the identified model.
    Generate { config: PathBuf },
    /// Multilevel Monte Carlo moments of the configured quantity of interest.
    Uq { config: PathBuf },
    /// Evaluate a quantity of interest on one volume.
    Solve {
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        raw: PathBuf,
        #[arg(long, default_value = "youngs_modulus")]
        kind: QoiKind,
        #[arg(long, default_value_t = 1.0)]
        e_material: f64,
        #[arg(long, default_value_t = 0.3)]
        poisson: f64,
        #[arg(long, default_value_t = 1e-3)]
        strain: f64,
        #[arg(long, default_value = "x")]
        axis: Axis,
        #[arg(long, default_value_t = 1e-9)]
        void_factor: f64,
        /// Power-of-two block coarsening applied before evaluation.
        #[arg(long, default_value_t = 1)]
        factor: usize,
        #[arg(long, default_value_t = 1e-8)]
        rel_tol: f64,
    },
    /// Print volume statistics, optionally per unit cell.
    Inspect {
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        raw: PathBuf,
        /// Unit cell dims, e.g. `40x40x1`.
        #[arg(long)]
        cell_dims: Option<Dims>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Layout(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Identify { config } => commands::identify(&config),
        Command::Generate { config } => commands::generate(&config),
        Command::Uq { config } => commands::uq(&config),
        Command::Solve {
            meta,
            raw,
            kind,
            e_material,
            poisson,
            strain,
            axis,
            void_factor,
            factor,
            rel_tol,
        } => {
            let setup = voxrf::qoi::ElasticitySetup {
                e_material,
                poisson,
                applied_strain: strain,
                load_axis: axis,
                void_factor,
            };
            commands::solve(&meta, &raw, kind, &setup, factor, rel_tol)
        }
        Command::Inspect {
            meta,
            raw,
            cell_dims,
        } => commands::inspect(&meta, &raw, cell_dims),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
