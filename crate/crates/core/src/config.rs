//! Pipeline configuration, read from TOML.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Dims;
use crate::identify::FitMode;
use crate::mlmc::{CostMode, MlmcConfig};
use crate::qoi::{ElasticitySetup, QoiKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub input: InputConfig,
    #[serde(default)]
    pub identify: IdentifyConfig,
    #[serde(default)]
    pub generate: GenerateConfig,
    #[serde(default)]
    pub qoi: QoiConfig,
    #[serde(default)]
    pub mlmc: Option<MlmcConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    /// Sidecar metadata of the segmented volume.
    pub volume_meta: Option<PathBuf>,
    /// Raw u8 voxel data.
    pub volume_raw: Option<PathBuf>,
    pub cell_dims: Dims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifyConfig {
    /// Lag count per axis; 0 skips the axis (required for axes of extent 1).
    pub lags: [usize; 3],
    pub fit_mode: FitMode,
    /// Optional lag-convergence study: lag counts tried on every fitted axis.
    #[serde(default)]
    pub lag_study: Vec<usize>,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        IdentifyConfig {
            lags: [0; 3],
            fit_mode: FitMode::Matern,
            lag_study: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub count: usize,
    pub seed: u64,
    /// Specimen dims; defaults to the input volume dims.
    pub grid_dims: Option<Dims>,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Also write each realization as a volume.
    #[serde(default = "default_true")]
    pub write_volumes: bool,
}

fn default_bins() -> usize {
    30
}
fn default_true() -> bool {
    true
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            count: 1,
            seed: 0,
            grid_dims: None,
            histogram_bins: default_bins(),
            write_volumes: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QoiConfig {
    pub kind: QoiKind,
    pub elasticity: ElasticitySetup,
}

impl Default for QoiConfig {
    fn default() -> Self {
        QoiConfig {
            kind: QoiKind::Porosity,
            elasticity: ElasticitySetup::new(1.0, crate::field::Axis::X).expect("valid default"),
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(p) = self.input.volume_meta.as_mut() {
            fix(p);
        }
        if let Some(p) = self.input.volume_raw.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.input
            .cell_dims
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.input.volume_meta.is_some() != self.input.volume_raw.is_some() {
            return Err(Error::Config(
                "volume_meta and volume_raw must be given together".into(),
            ));
        }
        for (a, &n) in self.identify.lags.iter().enumerate() {
            if n > 0 && n >= self.input.cell_dims.0[a] {
                return Err(Error::Config(format!(
                    "lag count {n} must be below the cell extent {} on axis {a}",
                    self.input.cell_dims.0[a]
                )));
            }
        }
        if let Some(g) = self.generate.grid_dims {
            g.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.generate.histogram_bins == 0 {
            return Err(Error::Config("histogram_bins must be positive".into()));
        }
        self.qoi
            .elasticity
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if let Some(m) = &self.mlmc {
            m.validate()?;
        }
        Ok(())
    }

    /// MLMC settings with the CLI default of nominal costs, which keeps
    /// repeated runs byte-identical.
    pub fn mlmc_or_default(&self) -> MlmcConfig {
        self.mlmc.clone().unwrap_or_else(|| {
            let mut m = MlmcConfig::new(0.05, 3, 3, self.generate.seed);
            m.cost_mode = CostMode::Nominal;
            m
        })
    }
}
