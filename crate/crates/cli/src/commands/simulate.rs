use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::provenance::{stamp, OutDir, Provenance};

pub fn run(cfg: &ExperimentConfig) -> Result<i32> {
    let layout = cfg.layout.resolve()?;
    let truth = cfg.truth.resolve(&layout)?;
    let data = super::simulate_from(&truth, &layout, cfg.n_times, cfg.seed)?;
    let prov = Provenance::new("simulate", cfg);
    let out = OutDir::create(&cfg.out)?;

    let mut w = out.create_file("data.csv")?;
    data.write_csv(&mut w, Some(&prov.header()))?;
    out.finish("data.csv", w)?;
    out.write_json("layout.json", &stamp(&layout, &prov, &[]))?;
    out.write_json(
        "provenance.json",
        &json!({
            "provenance": prov,
            "truth": truth,
            "T": cfg.n_times,
            "n_sites": layout.n_sites(),
            "files": ["data.csv", "layout.json"],
        }),
    )?;
    log::info!("simulated {} x {} values into {}", cfg.n_times, layout.n_sites(), cfg.out.display());
    Ok(0)
}
