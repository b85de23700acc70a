use std::io::Write;
use std::path::Path;

use skt_spatial::gaussian::{gau_fit, GauEStep, GauIteration, GauParams};
use skt_spatial::mcem::{fit, initial_params, EmIteration, EmTrace};
use skt_spatial::model::Dataset;
use skt_spatial::report::{FitReport, FittedParams};
use skt_spatial::SpatialLayout;

use crate::config::{read_layout, ExperimentConfig, ModelKind};
use crate::error::{CliError, Result};
use crate::provenance::{stamp, OutDir, Provenance};

fn push_unique(flags: &mut Vec<String>, new: &[String]) {
    for f in new {
        if !flags.contains(f) {
            flags.push(f.clone());
        }
    }
}

/// Monte Carlo EM for the skew-t model. `sink` receives one trace CSV line
/// per iteration as it completes.
pub fn fit_skt(data: &Dataset, cfg: &ExperimentConfig, seed: u64, sink: &mut dyn FnMut(&str)) -> Result<FitReport> {
    let init = initial_params(data, &cfg.init)?;
    let mut fit_cfg = cfg.skt_fit.clone();
    fit_cfg.gibbs.seed = seed;
    let mut flags = Vec::new();
    let mut cb = |it: &EmIteration| {
        sink(&EmTrace::csv_line(it));
        push_unique(&mut flags, &it.flags);
    };
    let out = fit(data, &init, &fit_cfg, Some(&mut cb))?;
    Ok(FitReport::new(
        FittedParams::Skt(out.params),
        out.status,
        out.trace.iterations.len() - 1,
        out.loglik,
        data.layout(),
        data.n_times(),
        seed,
        flags,
    ))
}

/// EM for the Gaussian model, started from the zero-skewness version of the
/// skew-t starting values.
pub fn fit_gau(data: &Dataset, cfg: &ExperimentConfig, seed: u64, sink: &mut dyn FnMut(&str)) -> Result<FitReport> {
    let init = GauParams::from_skt(&initial_params(data, &cfg.init)?);
    let mut fit_cfg = cfg.gau_fit.clone();
    if let GauEStep::Gibbs { seed: s, .. } = &mut fit_cfg.estep {
        *s = seed;
    }
    let out = gau_fit(data, &init, &fit_cfg)?;
    let mut flags = Vec::new();
    for it in &out.trace {
        sink(&it.csv_line());
        push_unique(&mut flags, &it.flags);
    }
    Ok(FitReport::new(
        FittedParams::Gau(out.params),
        out.status,
        out.trace.len() - 1,
        out.loglik,
        data.layout(),
        data.n_times(),
        seed,
        flags,
    ))
}

pub fn read_dataset(path: &Path, layout: SpatialLayout) -> Result<(Dataset, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let data = Dataset::read_csv(bytes.as_slice(), layout).map_err(|e| match e {
        skt_spatial::Error::Io(io) => CliError::io(path, io),
        other => CliError::input(path, other),
    })?;
    Ok((data, bytes))
}

pub fn run(cfg: &ExperimentConfig, data_path: &Path, layout_path: Option<&Path>) -> Result<i32> {
    let layout = match layout_path {
        Some(p) => read_layout(p)?,
        None => cfg.layout.resolve()?,
    };
    let (data, bytes) = read_dataset(data_path, layout)?;
    if data.n_times() == 0 {
        return Err(CliError::input(data_path, "no data rows"));
    }
    let prov = Provenance::new("fit", cfg).with_input("data", &bytes);
    let out = OutDir::create(&cfg.out)?;

    let mut w = out.create_file("trace.csv")?;
    let header = match cfg.model {
        ModelKind::Skt => EmTrace::CSV_HEADER,
        ModelKind::Gau => GauIteration::CSV_HEADER,
    };
    let mut io_error = writeln!(w, "# {}\n{header}", prov.header()).err();
    let mut sink = |line: &str| {
        if io_error.is_none() {
            io_error = writeln!(w, "{line}").and_then(|_| w.flush()).err();
        }
    };
    let report = match cfg.model {
        ModelKind::Skt => fit_skt(&data, cfg, cfg.seed, &mut sink)?,
        ModelKind::Gau => fit_gau(&data, cfg, cfg.seed, &mut sink)?,
    };
    if let Some(e) = io_error {
        return Err(CliError::io(&out.path("trace.csv"), e));
    }
    out.finish("trace.csv", w)?;

    let layout_json = serde_json::to_value(data.layout()).expect("layout serializes");
    out.write_json("report.json", &stamp(&report, &prov, &[("layout", layout_json)]))?;
    log::info!(
        "{} fit: {:?} after {} iterations, loglik {:.3} (se {:.3}), BIC {:.2}, AIC {:.2}",
        report.fitted.tag(),
        report.status,
        report.iterations,
        report.loglik.value,
        report.loglik.stderr,
        report.score.bic,
        report.score.aic
    );
    Ok(super::status_code(report.status))
}
