pub mod compare;
pub mod fit;
pub mod generate;
pub mod simulate;

use skt_spatial::gaussian::gau_simulate;
use skt_spatial::mcem::FitStatus;
use skt_spatial::model::{simulate, Dataset};
use skt_spatial::report::FittedParams;
use skt_spatial::SpatialLayout;

use crate::error::Result;

/// Draw `n_times` rows from either model.
pub fn simulate_from(params: &FittedParams, layout: &SpatialLayout, n_times: usize, seed: u64) -> Result<Dataset> {
    Ok(match params {
        FittedParams::Skt(p) => simulate(p, layout, n_times, seed)?.data,
        FittedParams::Gau(p) => gau_simulate(p, layout, n_times, seed)?,
    })
}

/// 0 converged, 2 stopped at the iteration limit, 3 aborted.
pub fn status_code(status: FitStatus) -> i32 {
    match status {
        FitStatus::Converged => 0,
        FitStatus::MaxIterations => 2,
        FitStatus::Aborted => 3,
    }
}
