//! Serialized fit results shared by both models.

use serde::{Deserialize, Serialize};

use crate::gaussian::GauParams;
use crate::linalg::SpatialLayout;
use crate::mcem::FitStatus;
use crate::model::SktParams;
use crate::selection::{LikelihoodEstimate, ModelScore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", content = "params")]
pub enum FittedParams {
    #[serde(rename = "SKT")]
    Skt(SktParams),
    #[serde(rename = "GAU")]
    Gau(GauParams),
}

impl FittedParams {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Skt(_) => "SKT",
            Self::Gau(_) => "GAU",
        }
    }

    pub fn n_params(&self, layout: &SpatialLayout) -> usize {
        match self {
            Self::Skt(p) => p.n_params(layout),
            Self::Gau(p) => p.n_params(layout),
        }
    }
}

/// Everything needed to reproduce and reuse a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    #[serde(flatten)]
    pub fitted: FittedParams,
    pub status: FitStatus,
    pub iterations: usize,
    pub loglik: LikelihoodEstimate,
    pub score: ModelScore,
    /// Parameter counting convention used for `score.k`.
    pub k_convention: String,
    pub seed: u64,
    pub flags: Vec<String>,
}

pub const K_CONVENTION: &str =
    "SKT: sum_r(|delta_r| + |zeta_r| + 1 + |Psi_r|) + |Sigma|; GAU: sum_r(1 + |Psi_r|) + |Sigma|; \
     tied zeta counts 1, Matérn counts 1 (range), free correlation counts n(n-1)/2; n_obs = T*d";

impl FitReport {
    pub fn new(
        fitted: FittedParams,
        status: FitStatus,
        iterations: usize,
        loglik: LikelihoodEstimate,
        layout: &SpatialLayout,
        n_times: usize,
        seed: u64,
        flags: Vec<String>,
    ) -> Self {
        let k = fitted.n_params(layout);
        let score = ModelScore::new(loglik.value, loglik.stderr, k, n_times * layout.n_sites());
        Self { fitted, status, iterations, loglik, score, k_convention: K_CONVENTION.into(), seed, flags }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}
