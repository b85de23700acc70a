use std::path::Path;

use serde::Serialize;
use skt_spatial::model::Dataset;
use skt_spatial::report::{FitReport, FittedParams};
use skt_spatial::rng::derive_seed;

use crate::config::{read_layout, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::provenance::{OutDir, Provenance};

#[derive(Debug, Clone, Serialize)]
pub struct SiteSummary {
    pub id: String,
    pub mean: f64,
    pub sd: f64,
    pub skewness: f64,
    /// Excess kurtosis.
    pub kurtosis: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub file: String,
    pub sites: Vec<SiteSummary>,
    /// Correlation of region-mean series, `R x R`.
    pub region_correlation: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct GenerateSummary<'a> {
    provenance: &'a Provenance,
    model: &'static str,
    #[serde(rename = "T")]
    n_times: usize,
    warnings: Vec<String>,
    runs: Vec<RunSummary>,
}

fn moments(x: &[f64]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let central = |k: i32| x.iter().map(|v| (v - mean).powi(k)).sum::<f64>() / n;
    let (m2, m3, m4) = (central(2), central(3), central(4));
    let sd = (m2 * n / (n - 1.0)).sqrt();
    (mean, sd, m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

pub fn summarize(data: &Dataset) -> (Vec<SiteSummary>, Vec<Vec<f64>>) {
    let y = data.values();
    let layout = data.layout();
    let sites = layout
        .sites()
        .iter()
        .enumerate()
        .map(|(s, site)| {
            let col: Vec<f64> = y.column(s).iter().copied().collect();
            let (mean, sd, skewness, kurtosis) = moments(&col);
            SiteSummary { id: site.id.clone(), mean, sd, skewness, kurtosis }
        })
        .collect();
    let means: Vec<Vec<f64>> = (0..layout.n_regions())
        .map(|r| {
            let range = layout.region_range(r);
            (0..data.n_times()).map(|t| y.row(t).columns(range.start, range.len()).mean()).collect()
        })
        .collect();
    let corr = means.iter().map(|a| means.iter().map(|b| correlation(a, b)).collect()).collect();
    (sites, corr)
}

pub fn run(cfg: &ExperimentConfig, report_path: &Path, layout_path: Option<&Path>) -> Result<i32> {
    let bytes = std::fs::read(report_path).map_err(|e| CliError::io(report_path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| CliError::input(report_path, e))?;
    let report: FitReport = serde_json::from_value(value.clone()).map_err(|e| CliError::input(report_path, e))?;
    let layout = match (layout_path, value.get("layout")) {
        (Some(p), _) => read_layout(p)?,
        (None, Some(l)) => serde_json::from_value(l.clone()).map_err(|e| CliError::input(report_path, e))?,
        (None, None) => cfg.layout.resolve()?,
    };
    let mut warnings = Vec::new();
    match &report.fitted {
        FittedParams::Skt(p) => {
            p.validate(&layout)?;
            for (r, region) in p.regions.iter().enumerate() {
                if region.nu <= 2.0 {
                    warnings.push(format!(
                        "region {r}: nu = {} <= 2, variance is infinite and sd/kurtosis summaries are unstable",
                        region.nu
                    ));
                }
            }
        }
        FittedParams::Gau(p) => p.validate(&layout)?,
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let prov = Provenance::new("generate", cfg).with_input("report", &bytes);
    let out = OutDir::create(&cfg.out)?;
    let mut runs = Vec::with_capacity(cfg.generate.runs);
    for i in 0..cfg.generate.runs {
        let seed = derive_seed(cfg.seed, "run", i as u64);
        let data = super::simulate_from(&report.fitted, &layout, cfg.n_times, seed)?;
        let file = format!("run_{i:04}.csv");
        let mut w = out.create_file(&file)?;
        data.write_csv(&mut w, Some(&format!("{} run={i} run_seed={seed}", prov.header())))?;
        out.finish(&file, w)?;
        let (sites, region_correlation) = summarize(&data);
        runs.push(RunSummary { run: i, seed, file, sites, region_correlation });
    }
    out.write_json(
        "summary.json",
        &GenerateSummary { provenance: &prov, model: report.fitted.tag(), n_times: cfg.n_times, warnings, runs },
    )?;
    log::info!("wrote {} runs of T = {} to {}", cfg.generate.runs, cfg.n_times, cfg.out.display());
    Ok(0)
}
