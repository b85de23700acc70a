use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use skt_spatial::mcem::FitStatus;
use skt_spatial::report::{FitReport, FittedParams};
use skt_spatial::rng::derive_seed;
use skt_spatial::selection::{ComparisonReport, ComparisonSummary, ReplicateRow};
use skt_spatial::SpatialLayout;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::provenance::{stamp, OutDir, Provenance};

use super::fit::{fit_gau, fit_skt};

/// Seed of replicate `i`. Passing it as `--seed` to `simulate` and `fit`
/// reproduces the replicate.
pub fn replicate_seed(master: u64, i: usize) -> u64 {
    derive_seed(master, "replicate", i as u64)
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateStatus {
    pub replicate: usize,
    pub skt: Option<FitStatus>,
    pub gau: Option<FitStatus>,
    pub skt_iterations: Option<usize>,
    pub gau_iterations: Option<usize>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    seed: u64,
    loglik_skt: Option<f64>,
    loglik_gau: Option<f64>,
    k_skt: Option<usize>,
    k_gau: Option<usize>,
    bic_skt: Option<f64>,
    bic_gau: Option<f64>,
    aic_skt: Option<f64>,
    aic_gau: Option<f64>,
    replicate: usize,
    loglik_se_skt: Option<f64>,
    status_skt: Option<FitStatus>,
    status_gau: Option<FitStatus>,
    error: Option<&'a str>,
}

fn one_replicate(
    cfg: &ExperimentConfig,
    layout: &SpatialLayout,
    truth: &FittedParams,
    i: usize,
) -> (ReplicateRow, ReplicateStatus) {
    let seed = replicate_seed(cfg.seed, i);
    let mut row = ReplicateRow { replicate: i, seed, skt: None, gau: None, error: None };
    let mut status = ReplicateStatus { replicate: i, skt: None, gau: None, skt_iterations: None, gau_iterations: None };
    let fits = (|| -> Result<(FitReport, FitReport)> {
        let data = super::simulate_from(truth, layout, cfg.n_times, seed)?;
        let skt = fit_skt(&data, cfg, seed, &mut |_| {})?;
        let gau = fit_gau(&data, cfg, seed, &mut |_| {})?;
        Ok((skt, gau))
    })();
    match fits {
        Ok((skt, gau)) => {
            status.skt = Some(skt.status);
            status.gau = Some(gau.status);
            status.skt_iterations = Some(skt.iterations);
            status.gau_iterations = Some(gau.iterations);
            let aborted: Vec<&str> = [(&skt, "SKT"), (&gau, "GAU")]
                .iter()
                .filter(|(r, _)| r.status == FitStatus::Aborted)
                .map(|(_, tag)| *tag)
                .collect();
            if aborted.is_empty() {
                row.skt = Some(skt.score);
                row.gau = Some(gau.score);
            } else {
                row.error = Some(format!("{} fit aborted on likelihood decreases", aborted.join(" and ")));
            }
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    match &row.error {
        Some(e) => log::warn!("replicate {i} (seed {seed}) failed: {e}"),
        None => log::info!("replicate {i} (seed {seed}) done"),
    }
    (row, status)
}

pub fn run(cfg: &ExperimentConfig) -> Result<i32> {
    let layout = cfg.layout.resolve()?;
    let truth = cfg.truth.resolve(&layout)?;
    if cfg.n_times == 0 {
        return Err(CliError::usage("compare needs T >= 1"));
    }
    let prov = Provenance::new("compare", cfg);
    let out = OutDir::create(&cfg.out)?;

    let results: Vec<(ReplicateRow, ReplicateStatus)> =
        (0..cfg.replicates).into_par_iter().map(|i| one_replicate(cfg, &layout, &truth, i)).collect();
    let (rows, statuses): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let report = ComparisonReport { summary: ComparisonSummary::from_rows(&rows), rows };

    write_replicates(&out, &prov, &report.rows, &statuses)?;
    write_plot(&out, &prov, &report.rows)?;
    let statuses_json = serde_json::to_value(&statuses).expect("statuses serialize");
    out.write_json("summary.json", &stamp(&report, &prov, &[("statuses", statuses_json)]))?;

    let s = &report.summary;
    log::info!(
        "SKT wins BIC in {}/{} and AIC in {}/{} successful replicates",
        s.skt_bic_wins,
        s.replicates - s.failed,
        s.skt_aic_wins,
        s.replicates - s.failed
    );
    if s.failed > 0 {
        return Err(CliError::Replicates { failed: s.failed, total: s.replicates });
    }
    Ok(0)
}

fn csv_file(out: &OutDir, prov: &Provenance, name: &str) -> Result<csv::Writer<std::io::BufWriter<std::fs::File>>> {
    let mut w = out.create_file(name)?;
    writeln!(w, "# {}", prov.header()).map_err(|e| CliError::io(&out.path(name), e))?;
    Ok(csv::Writer::from_writer(w))
}

fn finish_csv(out: &OutDir, name: &str, w: csv::Writer<std::io::BufWriter<std::fs::File>>) -> Result<()> {
    let inner = w.into_inner().map_err(|e| CliError::io(&out.path(name), e.into_error()))?;
    out.finish(name, inner)
}

fn csv_error(out: &OutDir, name: &str, e: csv::Error) -> CliError {
    CliError::io(&out.path(name), e.into())
}

fn write_replicates(out: &OutDir, prov: &Provenance, rows: &[ReplicateRow], statuses: &[ReplicateStatus]) -> Result<()> {
    let name = "replicates.csv";
    let mut w = csv_file(out, prov, name)?;
    for (r, st) in rows.iter().zip(statuses) {
        let (s, g) = (r.skt.as_ref(), r.gau.as_ref());
        w.serialize(CsvRow {
            seed: r.seed,
            loglik_skt: s.map(|x| x.loglik),
            loglik_gau: g.map(|x| x.loglik),
            k_skt: s.map(|x| x.k),
            k_gau: g.map(|x| x.k),
            bic_skt: s.map(|x| x.bic),
            bic_gau: g.map(|x| x.bic),
            aic_skt: s.map(|x| x.aic),
            aic_gau: g.map(|x| x.aic),
            replicate: r.replicate,
            loglik_se_skt: s.map(|x| x.loglik_se),
            status_skt: st.skt,
            status_gau: st.gau,
            error: r.error.as_deref(),
        })
        .map_err(|e| csv_error(out, name, e))?;
    }
    finish_csv(out, name, w)
}

/// Long format: one line per (replicate, criterion, model).
fn write_plot(out: &OutDir, prov: &Provenance, rows: &[ReplicateRow]) -> Result<()> {
    let name = "plot.csv";
    let mut w = csv_file(out, prov, name)?;
    w.write_record(["replicate", "seed", "criterion", "model", "value"]).map_err(|e| csv_error(out, name, e))?;
    for r in rows {
        for (model, score) in [("SKT", &r.skt), ("GAU", &r.gau)] {
            let Some(score) = score else { continue };
            for (criterion, value) in [("BIC", score.bic), ("AIC", score.aic)] {
                w.write_record([r.replicate.to_string(), r.seed.to_string(), criterion.into(), model.into(), format!("{value:?}")])
                    .map_err(|e| csv_error(out, name, e))?;
            }
        }
    }
    finish_csv(out, name, w)
}
