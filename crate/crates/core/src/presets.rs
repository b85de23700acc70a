//! The two-region simulation design used throughout the tests and the
//! shipped configuration.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::linalg::SpatialLayout;
use crate::model::{CorrelationModel, RegionParams, SktParams, ZetaMode};

pub const APPENDIX_LATS: [f64; 3] = [20.26, 21.205, 22.15];
pub const APPENDIX_LONS: [[f64; 3]; 2] = [[40.0, 41.0, 42.0], [43.0, 44.0, 45.0]];

/// Two 3x3 grids in adjacent 3-degree longitude blocks.
pub fn appendix_layout() -> SpatialLayout {
    let lons: Vec<Vec<f64>> = APPENDIX_LONS.iter().map(|l| l.to_vec()).collect();
    SpatialLayout::from_grids(&APPENDIX_LATS, &lons).expect("fixed grid is valid")
}

/// `n` evenly spaced values on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// zeta = 0.2, nu = 3, delta evenly spread on [0.453, 0.754], Matérn
/// range 90 km with smoothness 1.5, cross-region correlation 0.9.
pub fn appendix_params() -> Result<SktParams> {
    let region = RegionParams {
        delta: linspace(0.453, 0.754, 9),
        zeta: vec![0.2; 9],
        nu: 3.0,
        psi: CorrelationModel::matern(90.0, 1.5)?,
    };
    Ok(SktParams {
        regions: vec![region.clone(), region],
        sigma: CorrelationModel::free(&DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0])),
        zeta_mode: ZetaMode::Tied,
    })
}
