//! Observed-data log-likelihoods, information criteria and covariance
//! comparison metrics.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GauModel, GauParams};
use crate::linalg::SpatialLayout;
use crate::model::{simulate, CompiledModel, Dataset, SktParams};
use crate::rng;
use crate::special::{ln_gamma, ln_normal_cdf, sample_positive_truncated_normal, LN_2PI};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodEstimate {
    pub value: f64,
    /// Monte Carlo standard error; zero for closed forms.
    pub stderr: f64,
    pub draws: usize,
    pub method: String,
}

/// In-place Cholesky of a small dense row-major matrix. Returns
/// `log|A|`, or `None` if a pivot is not positive.
fn small_cholesky(a: &mut [f64], n: usize) -> Option<f64> {
    let mut log_det = 0.0;
    for j in 0..n {
        let mut s = a[j * n + j];
        for k in 0..j {
            s -= a[j * n + k] * a[j * n + k];
        }
        if !(s > 0.0) {
            return None;
        }
        let l = s.sqrt();
        a[j * n + j] = l;
        log_det += 2.0 * l.ln();
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / l;
        }
    }
    Some(log_det)
}

/// `b^T A^{-1} b` from the factor produced by [`small_cholesky`].
fn small_quad(l: &[f64], n: usize, b: &[f64], work: &mut [f64]) -> f64 {
    let mut q = 0.0;
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * work[k];
        }
        work[i] = s / l[i * n + i];
        q += work[i] * work[i];
    }
    q
}

/// Combine per-draw log values into `log mean exp` and its delta-method
/// variance.
fn log_mean_exp(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return (max, 0.0);
    }
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for &v in values {
        let w = (v - max).exp();
        s1 += w;
        s2 += w * w;
    }
    let mean = s1 / m;
    let var = (s2 / m - mean * mean).max(0.0) * m / (m - 1.0).max(1.0);
    (max + mean.ln(), var / (m * mean * mean))
}

/// Importance distribution for `(Z_r, eta1_r)` in [`skt_marginal_loglik`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LikelihoodProposal {
    /// Draws from the latent prior.
    Prior,
    /// Per time point, a mixture of the prior (weight `prior_weight`) and a
    /// Gamma / truncated-normal approximation to each region's posterior.
    #[default]
    Defensive,
}

const PRIOR_WEIGHT: f64 = 0.3;

fn ln_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Log density of N(mean, 1/prec) truncated to [0, inf).
fn ln_trunc_normal_pdf(x: f64, mean: f64, prec: f64) -> f64 {
    let s = prec.sqrt();
    -0.5 * LN_2PI + s.ln() - 0.5 * prec * (x - mean).powi(2) - ln_normal_cdf(mean * s)
}

fn ln_mix(a: f64, b: f64, w: f64) -> f64 {
    let (x, y) = (w.ln() + a, (1.0 - w).ln() + b);
    let m = x.max(y);
    m + ((x - m).exp() + (y - m).exp()).ln()
}

/// Per-region quantities of the adapted proposal.
struct RegionProposal {
    /// `(G + c c^T)^{-1}` with `G = zeta zeta^T + Upsilon`.
    h_inv: DMatrix<f64>,
    /// `G^{-1} c`.
    g_inv_c: DVector<f64>,
    /// `c^T G^{-1} c`.
    kappa: f64,
}

impl RegionProposal {
    fn new(m: &crate::model::RegionModel) -> Result<Self> {
        let g = &m.zeta * m.zeta.transpose() + m.upsilon.matrix();
        let g = crate::linalg::SpdMatrix::new(g)?;
        let g_inv_c = g.solve(&m.c);
        let kappa = m.c.dot(&g_inv_c);
        let h = crate::linalg::SpdMatrix::new(g.matrix() + &m.c * m.c.transpose())?;
        Ok(Self { h_inv: h.inverse(), g_inv_c, kappa })
    }
}

/// Observed-data log-likelihood of the skew-t model with the default
/// proposal.
pub fn skt_marginal_loglik(data: &Dataset, model: &CompiledModel, draws: usize, seed: u64) -> Result<LikelihoodEstimate> {
    skt_marginal_loglik_with(data, model, draws, seed, LikelihoodProposal::default())
}

/// Observed-data log-likelihood of the skew-t model. For each time point
/// the large-scale variable is integrated analytically and the Gaussian
/// conditional density is averaged over `draws` importance draws of the
/// mixing and half-normal variables.
pub fn skt_marginal_loglik_with(
    data: &Dataset,
    model: &CompiledModel,
    draws: usize,
    seed: u64,
    proposal: LikelihoodProposal,
) -> Result<LikelihoodEstimate> {
    if draws == 0 {
        return Err(Error::invalid("the likelihood estimator needs at least one draw"));
    }
    let n = model.n_regions();
    let priors = model
        .regions
        .iter()
        .map(|m| Gamma::new(0.5 * m.nu, 2.0 / m.nu).map_err(|e| Error::InvalidParams(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let adapted = match proposal {
        LikelihoodProposal::Prior => None,
        LikelihoodProposal::Defensive => {
            Some(model.regions.iter().map(RegionProposal::new).collect::<Result<Vec<_>>>()?)
        }
    };
    let lam = &model.lambda;
    let base: f64 = model
        .regions
        .iter()
        .map(|m| -0.5 * m.d as f64 * LN_2PI - 0.5 * m.upsilon.log_det())
        .sum::<f64>()
        - 0.5 * model.sigma.log_det();
    let per_t: Vec<Result<(f64, f64)>> = (0..data.n_times())
        .into_par_iter()
        .map(|t| {
            let y = data.row(t);
            let blocks: Vec<DVector<f64>> = (0..n).map(|r| model.block(&y, r)).collect();
            let sc: Vec<_> = model.regions.iter().zip(&blocks).map(|(m, b)| m.data_scalars(b)).collect();
            // adapted Gamma rate and truncated-normal mean per region
            let tuned: Option<Vec<(Gamma<f64>, f64, f64, f64)>> = match &adapted {
                None => None,
                Some(ad) => Some(
                    ad.iter()
                        .zip(&model.regions)
                        .zip(&blocks)
                        .map(|((a, m), b)| {
                            let q = (b.transpose() * &a.h_inv * b)[(0, 0)];
                            let shape = 0.5 * (m.nu + m.d as f64);
                            let rate = 0.5 * (m.nu + q);
                            let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::InvalidParams(e.to_string()))?;
                            Ok((g, shape, rate, a.g_inv_c.dot(b) / (1.0 + a.kappa)))
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
            };
            let mut rng = rng::stream(seed, "loglik-time", t as u64);
            let mut z = vec![0.0; n];
            let mut e1 = vec![0.0; n];
            let mut h = vec![0.0; n * n];
            let mut w = vec![0.0; n];
            let mut work = vec![0.0; n];
            let mut logs = Vec::with_capacity(draws);
            for _ in 0..draws {
                let mut log_ratio = 0.0;
                for r in 0..n {
                    match (&tuned, &adapted) {
                        (Some(tu), Some(ad)) => {
                            let (g, shape, rate, mu) = tu[r];
                            let nu = model.regions[r].nu;
                            z[r] = if rng.random::<f64>() < PRIOR_WEIGHT { priors[r].sample(&mut rng) } else { g.sample(&mut rng) };
                            let lp = ln_gamma_pdf(z[r], 0.5 * nu, 0.5 * nu);
                            log_ratio += lp - ln_mix(lp, ln_gamma_pdf(z[r], shape, rate), PRIOR_WEIGHT);
                            let prec = z[r] * (1.0 + ad[r].kappa);
                            e1[r] = if rng.random::<f64>() < PRIOR_WEIGHT {
                                let u: f64 = StandardNormal.sample(&mut rng);
                                u.abs() / z[r].sqrt()
                            } else {
                                sample_positive_truncated_normal(mu, 1.0 / prec.sqrt(), &mut rng)
                            };
                            let lp = ln_trunc_normal_pdf(e1[r], 0.0, z[r]);
                            log_ratio += lp - ln_mix(lp, ln_trunc_normal_pdf(e1[r], mu, prec), PRIOR_WEIGHT);
                        }
                        _ => {
                            z[r] = priors[r].sample(&mut rng);
                            let u: f64 = StandardNormal.sample(&mut rng);
                            e1[r] = u.abs() / z[r].sqrt();
                        }
                    }
                }
                let mut value = base + log_ratio;
                let mut quad = 0.0;
                for r in 0..n {
                    let m = &model.regions[r];
                    let s = &sc[r];
                    let lz = z[r].ln();
                    value += 0.5 * (m.d as f64 + 1.0) * lz;
                    quad += z[r] * (s.yy - 2.0 * e1[r] * s.cy + e1[r] * e1[r] * m.cc);
                    w[r] = z[r] * (s.zy - e1[r] * m.ce);
                    for j in 0..n {
                        h[r * n + j] = (z[r] * z[j]).sqrt() * lam[(r, j)];
                    }
                    h[r * n + r] += z[r] * m.za;
                }
                let Some(log_det_h) = small_cholesky(&mut h, n) else {
                    logs.push(f64::NEG_INFINITY);
                    continue;
                };
                quad -= small_quad(&h, n, &w, &mut work);
                logs.push(value - 0.5 * log_det_h - 0.5 * quad);
            }
            Ok(log_mean_exp(&logs))
        })
        .collect();
    let mut value = 0.0;
    let mut var = 0.0;
    for res in per_t {
        let (v, s2) = res?;
        value += v;
        var += s2;
    }
    if !value.is_finite() {
        return Err(Error::InvalidParams("log-likelihood estimate is not finite".into()));
    }
    let method = match proposal {
        LikelihoodProposal::Prior => "skt-prior",
        LikelihoodProposal::Defensive => "skt-defensive-mixture",
    };
    Ok(LikelihoodEstimate { value, stderr: var.sqrt(), draws, method: method.into() })
}

/// Closed-form log-likelihood of the Gaussian model.
pub fn gau_loglik(data: &Dataset, params: &GauParams) -> Result<LikelihoodEstimate> {
    let model = params.compile(data.layout())?;
    let cov = model.marginal_covariance();
    let spd = crate::linalg::SpdMatrix::new(cov)?;
    let value = (0..data.n_times()).map(|t| spd.ln_normal_density(&data.row(t))).sum();
    Ok(LikelihoodEstimate { value, stderr: 0.0, draws: 0, method: "gau-closed-form".into() })
}

/// Monte Carlo log-likelihood of the Gaussian model from prior draws of the
/// large-scale vector; used to cross-check [`gau_loglik`].
pub fn gau_marginal_loglik_mc(data: &Dataset, params: &GauParams, draws: usize, seed: u64) -> Result<LikelihoodEstimate> {
    if draws == 0 {
        return Err(Error::invalid("the likelihood estimator needs at least one draw"));
    }
    let model: GauModel = params.compile(data.layout())?;
    let n = model.n_regions();
    let sigma_l = model.sigma.lower();
    let per_t: Vec<(f64, f64)> = (0..data.n_times())
        .into_par_iter()
        .map(|t| {
            let y = data.row(t);
            let mut rng = rng::stream(seed, "gau-loglik-time", t as u64);
            let blocks: Vec<DVector<f64>> = (0..n).map(|r| y.rows(model.ranges[r].start, model.ranges[r].len()).into_owned()).collect();
            let mut logs = Vec::with_capacity(draws);
            for _ in 0..draws {
                let e = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
                let x0 = &sigma_l * e;
                let mut v = 0.0;
                for r in 0..n {
                    let resid = blocks[r].map(|yi| yi - model.zeta[r] * x0[r]);
                    v += model.residual_cov[r].ln_normal_density(&resid);
                }
                logs.push(v);
            }
            log_mean_exp(&logs)
        })
        .collect();
    let mut value = 0.0;
    let mut var = 0.0;
    for (v, s2) in per_t {
        value += v;
        var += s2;
    }
    Ok(LikelihoodEstimate { value, stderr: var.sqrt(), draws, method: "gau-prior-mc".into() })
}

/// `(BIC, AIC) = (k log n - 2 l, 2k - 2 l)`.
pub fn information_criteria(loglik: f64, k: usize, n_obs: usize) -> (f64, f64) {
    let k = k as f64;
    (k * (n_obs as f64).ln() - 2.0 * loglik, 2.0 * k - 2.0 * loglik)
}

/// `||C_a - C_b||_F / ||C_b||_F`.
pub fn frobenius_improvement(c_a: &DMatrix<f64>, c_b: &DMatrix<f64>) -> Result<f64> {
    if c_a.shape() != c_b.shape() {
        return Err(Error::DimensionMismatch { expected: c_b.nrows(), got: c_a.nrows() });
    }
    let denom = c_b.norm();
    if denom == 0.0 {
        return Err(Error::invalid("reference matrix has zero Frobenius norm"));
    }
    Ok((c_a - c_b).norm() / denom)
}

/// Region-level covariance of the region-mean fields, with Monte Carlo
/// standard errors of every entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCovariance {
    pub covariance: DMatrix<f64>,
    pub stderr: DMatrix<f64>,
    pub samples: usize,
}

fn check_finite_variance(params: &SktParams) -> Result<()> {
    for (r, p) in params.regions.iter().enumerate() {
        if p.nu <= 2.0 {
            return Err(Error::UndefinedVariance { region: r, nu: p.nu });
        }
    }
    Ok(())
}

/// Monte Carlo estimate of `Cov(mean_r Y, mean_s Y)` implied by `params`.
pub fn implied_cross_covariance(params: &SktParams, layout: &SpatialLayout, samples: usize, seed: u64) -> Result<CrossCovariance> {
    check_finite_variance(params)?;
    if samples < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let sim = simulate(params, layout, samples, seed)?;
    let n = layout.n_regions();
    let means = DMatrix::from_fn(samples, n, |t, r| {
        let range = layout.region_range(r);
        let len = range.len() as f64;
        range.map(|s| sim.data.values()[(t, s)]).sum::<f64>() / len
    });
    let centers: Vec<f64> = (0..n).map(|r| means.column(r).mean()).collect();
    let mut cov = DMatrix::zeros(n, n);
    let mut se = DMatrix::zeros(n, n);
    let m = samples as f64;
    for i in 0..n {
        for j in 0..n {
            let prods: Vec<f64> = (0..samples)
                .map(|t| (means[(t, i)] - centers[i]) * (means[(t, j)] - centers[j]))
                .collect();
            let mean = prods.iter().sum::<f64>() / m;
            let var = prods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (m - 1.0);
            cov[(i, j)] = mean * m / (m - 1.0);
            se[(i, j)] = (var / m).sqrt();
        }
    }
    Ok(CrossCovariance { covariance: cov, stderr: se, samples })
}

/// `E[Z^{-1/2}]` for `Z ~ Gamma(nu/2, rate nu/2)`.
pub fn mean_inverse_sqrt_gamma(nu: f64) -> f64 {
    (ln_gamma(0.5 * (nu - 1.0)) - ln_gamma(0.5 * nu)).exp() * (0.5 * nu).sqrt()
}

/// Analytic off-diagonal entries of the region-mean covariance:
/// `mean(zeta_r) mean(zeta_s) Sigma_rs E[Z_r^{-1/2}] E[Z_s^{-1/2}]`.
/// The diagonal is left at zero.
pub fn analytic_cross_covariance(params: &SktParams, layout: &SpatialLayout) -> Result<DMatrix<f64>> {
    check_finite_variance(params)?;
    let model = params.compile(layout)?;
    let n = layout.n_regions();
    let zbar: Vec<f64> = model.regions.iter().map(|m| m.zeta.mean()).collect();
    let scale: Vec<f64> = model.regions.iter().map(|m| mean_inverse_sqrt_gamma(m.nu)).collect();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            zbar[i] * zbar[j] * model.sigma.matrix()[(i, j)] * scale[i] * scale[j]
        }
    }))
}

/// Criteria of one fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub loglik: f64,
    pub loglik_se: f64,
    pub k: usize,
    pub n_obs: usize,
    pub bic: f64,
    pub aic: f64,
}

impl ModelScore {
    pub fn new(loglik: f64, loglik_se: f64, k: usize, n_obs: usize) -> Self {
        let (bic, aic) = information_criteria(loglik, k, n_obs);
        Self { loglik, loglik_se, k, n_obs, bic, aic }
    }
}

/// One replicate of the model comparison experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub seed: u64,
    pub skt: Option<ModelScore>,
    pub gau: Option<ModelScore>,
    pub error: Option<String>,
}

impl ReplicateRow {
    pub fn bic_win(&self) -> Option<bool> {
        Some(self.skt.as_ref()?.bic < self.gau.as_ref()?.bic)
    }

    pub fn aic_win(&self) -> Option<bool> {
        Some(self.skt.as_ref()?.aic < self.gau.as_ref()?.aic)
    }
}

/// Aggregates over replicates; recomputable from the rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub replicates: usize,
    pub failed: usize,
    pub skt_bic_wins: usize,
    pub skt_aic_wins: usize,
    pub bic_win_fraction: f64,
    pub aic_win_fraction: f64,
    /// Mean of `bic_gau - bic_skt` over successful replicates.
    pub mean_bic_gap: f64,
    pub mean_aic_gap: f64,
    pub min_bic_gap: f64,
    pub min_aic_gap: f64,
}

impl ComparisonSummary {
    pub fn from_rows(rows: &[ReplicateRow]) -> Self {
        let ok: Vec<(&ModelScore, &ModelScore)> =
            rows.iter().filter_map(|r| Some((r.skt.as_ref()?, r.gau.as_ref()?))).collect();
        let n_ok = ok.len();
        let bic_wins = ok.iter().filter(|(s, g)| s.bic < g.bic).count();
        let aic_wins = ok.iter().filter(|(s, g)| s.aic < g.aic).count();
        let frac = |w: usize| if n_ok == 0 { 0.0 } else { w as f64 / n_ok as f64 };
        let gaps_bic: Vec<f64> = ok.iter().map(|(s, g)| g.bic - s.bic).collect();
        let gaps_aic: Vec<f64> = ok.iter().map(|(s, g)| g.aic - s.aic).collect();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
        Self {
            replicates: rows.len(),
            failed: rows.len() - n_ok,
            skt_bic_wins: bic_wins,
            skt_aic_wins: aic_wins,
            bic_win_fraction: frac(bic_wins),
            aic_win_fraction: frac(aic_wins),
            mean_bic_gap: mean(&gaps_bic),
            mean_aic_gap: mean(&gaps_aic),
            min_bic_gap: if gaps_bic.is_empty() { 0.0 } else { min(&gaps_bic) },
            min_aic_gap: if gaps_aic.is_empty() { 0.0 } else { min(&gaps_aic) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ReplicateRow>,
    pub summary: ComparisonSummary,
}
