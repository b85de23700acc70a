//! Multi-resolution skew-t spatial model.
//!
//! Sites are partitioned into regions. Within a region the field is a
//! skew-normal fine-scale process; a Gaussian large-scale vector couples the
//! regions, and a per-region Gamma mixing variable gives heavy tails. The
//! crate simulates the model, fits it by Monte Carlo EM, fits a Gaussian
//! baseline, and compares the two by BIC/AIC.

pub mod error;
pub mod gaussian;
pub mod linalg;
pub mod mcem;
pub mod model;
pub mod optimize;
pub mod presets;
pub mod quadrature;
pub mod report;
pub mod rng;
pub mod selection;
pub mod skew;
pub mod special;

pub use error::{Error, Result};
pub use linalg::{LonLat, MaternSpec, Site, SpatialLayout, SpdMatrix};
