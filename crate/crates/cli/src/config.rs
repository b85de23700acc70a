//! Experiment configuration: one TOML file, every field optional.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use skt_spatial::gaussian::{GauFitConfig, GauParams, GauRegionParams};
use skt_spatial::mcem::{FitConfig, InitConfig};
use skt_spatial::model::{CorrelationModel, RegionParams, SktParams, ZetaMode};
use skt_spatial::presets::{linspace, APPENDIX_LATS, APPENDIX_LONS};
use skt_spatial::report::FittedParams;
use skt_spatial::SpatialLayout;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Skt,
    Gau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; replicate and run seeds are derived from it.
    pub seed: u64,
    #[serde(rename = "T")]
    pub n_times: usize,
    pub replicates: usize,
    /// Model fitted by `fit`.
    pub model: ModelKind,
    pub out: PathBuf,
    pub layout: LayoutConfig,
    pub truth: TruthConfig,
    pub init: InitConfig,
    pub skt_fit: FitConfig,
    pub gau_fit: GauFitConfig,
    pub generate: GenerateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_times: 1000,
            replicates: 100,
            model: ModelKind::Skt,
            out: PathBuf::from("out"),
            layout: LayoutConfig::default(),
            truth: TruthConfig::default(),
            init: InitConfig::default(),
            skt_fit: FitConfig::default(),
            gau_fit: GauFitConfig::default(),
            generate: GenerateConfig::default(),
        }
    }
}

/// Either a layout JSON file or regular lon/lat grids, one per region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub file: Option<PathBuf>,
    pub lats: Vec<f64>,
    pub lons: Vec<Vec<f64>>,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self { file: None, lats: APPENDIX_LATS.to_vec(), lons: APPENDIX_LONS.iter().map(|l| l.to_vec()).collect() }
    }
}

impl LayoutConfig {
    pub fn resolve(&self) -> Result<SpatialLayout> {
        match &self.file {
            Some(path) => read_layout(path),
            None => Ok(SpatialLayout::from_grids(&self.lats, &self.lons)?),
        }
    }
}

pub fn read_layout(path: &Path) -> Result<SpatialLayout> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(path, e))
}

/// A scalar, an explicit list, or `{ from, to }` spread evenly over the
/// sites of each region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Values {
    Scalar(f64),
    List(Vec<f64>),
    Span { from: f64, to: f64 },
}

impl Values {
    fn per_site(&self, name: &str, d: usize) -> Result<Vec<f64>> {
        match self {
            Self::Scalar(x) => Ok(vec![*x; d]),
            Self::List(v) if v.len() == d => Ok(v.clone()),
            Self::List(v) => Err(CliError::usage(format!("truth.{name} has {} entries, region has {d} sites", v.len()))),
            Self::Span { from, to } => Ok(linspace(*from, *to, d)),
        }
    }
}

/// True parameters for simulation, shared by all regions, or loaded from a
/// JSON file holding a tagged parameter set (a fit report works).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthConfig {
    pub model: ModelKind,
    pub params_file: Option<PathBuf>,
    pub zeta: Values,
    pub delta: Values,
    pub nu: f64,
    pub range_km: f64,
    pub smoothness: f64,
    /// Common off-diagonal entry of the cross-region correlation.
    pub sigma: f64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Skt,
            params_file: None,
            zeta: Values::Scalar(0.2),
            delta: Values::Span { from: 0.453, to: 0.754 },
            nu: 3.0,
            range_km: 90.0,
            smoothness: 1.5,
            sigma: 0.9,
        }
    }
}

impl TruthConfig {
    pub fn resolve(&self, layout: &SpatialLayout) -> Result<FittedParams> {
        let params = match &self.params_file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::input(path, e))?
            }
            None => self.inline(layout)?,
        };
        match &params {
            FittedParams::Skt(p) => p.validate(layout)?,
            FittedParams::Gau(p) => p.validate(layout)?,
        }
        Ok(params)
    }

    fn inline(&self, layout: &SpatialLayout) -> Result<FittedParams> {
        let n_regions = layout.n_regions();
        let sigma = CorrelationModel::free(&constant_correlation(n_regions, self.sigma));
        let psi = CorrelationModel::matern(self.range_km, self.smoothness)?;
        match self.model {
            ModelKind::Skt => {
                let mut tied = true;
                let mut regions = Vec::with_capacity(n_regions);
                for r in 0..n_regions {
                    let d = layout.region_size(r);
                    let zeta = self.zeta.per_site("zeta", d)?;
                    tied &= zeta.iter().all(|&z| z == zeta[0]);
                    regions.push(RegionParams { delta: self.delta.per_site("delta", d)?, zeta, nu: self.nu, psi: psi.clone() });
                }
                let zeta_mode = if tied { ZetaMode::Tied } else { ZetaMode::Free };
                Ok(FittedParams::Skt(SktParams { regions, sigma, zeta_mode }))
            }
            ModelKind::Gau => {
                let zeta = match self.zeta {
                    Values::Scalar(z) => z,
                    _ => return Err(CliError::usage("the Gaussian model takes a scalar truth.zeta")),
                };
                let regions = (0..n_regions).map(|_| GauRegionParams { zeta, psi: psi.clone() }).collect();
                Ok(FittedParams::Gau(GauParams { regions, sigma }))
            }
        }
    }
}

fn constant_correlation(n: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { rho })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub runs: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { runs: 10 }
    }
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n_times: Option<usize>,
    pub replicates: Option<usize>,
    pub model: Option<ModelKind>,
    pub out: Option<PathBuf>,
    pub runs: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                let mut cfg: Self = toml::from_str(&text).map_err(|e| CliError::input(p, e))?;
                let base = p.parent().unwrap_or(Path::new(""));
                let rebase = |f: &mut Option<PathBuf>| {
                    if let Some(f) = f.as_mut().filter(|f| f.is_relative()) {
                        *f = base.join(&*f);
                    }
                };
                rebase(&mut cfg.layout.file);
                rebase(&mut cfg.truth.params_file);
                cfg
            }
            None => Self::default(),
        };
        if let Some(v) = overrides.seed {
            cfg.seed = v;
        }
        if let Some(v) = overrides.n_times {
            cfg.n_times = v;
        }
        if let Some(v) = overrides.replicates {
            cfg.replicates = v;
        }
        if let Some(v) = overrides.model {
            cfg.model = v;
        }
        if let Some(v) = &overrides.out {
            cfg.out = v.clone();
        }
        if let Some(v) = overrides.runs {
            cfg.generate.runs = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(CliError::usage("replicate count must be at least 1"));
        }
        self.skt_fit.validate()?;
        if !(self.gau_fit.tol > 0.0) {
            return Err(CliError::usage("gau_fit.tol must be positive"));
        }
        Ok(())
    }

    /// The resolved configuration without the seed and the output
    /// directory, which do not change what is computed.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("seed");
            map.remove("out");
        }
        v
    }
}
