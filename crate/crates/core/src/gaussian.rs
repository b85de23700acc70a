//! Gaussian baseline: the multi-resolution model without skewness or
//! mixing variables, with exact or Gibbs E-step.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{SpatialLayout, SpdMatrix};
use crate::mcem::{matern_range_update, update_sigma, FitStatus, MStepConfig, Monitor, MonitorStep, BOUND};
use crate::model::{CorrelationModel, Dataset, RegionParams, SktParams, ZetaMode};
use crate::optimize::maximize_scalar;
use crate::rng;
use crate::selection::{gau_loglik, LikelihoodEstimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GauRegionParams {
    pub zeta: f64,
    pub psi: CorrelationModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GauParams {
    pub regions: Vec<GauRegionParams>,
    pub sigma: CorrelationModel,
}

impl GauParams {
    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn validate(&self, layout: &SpatialLayout) -> Result<()> {
        if self.regions.len() != layout.n_regions() {
            return Err(Error::DimensionMismatch { expected: layout.n_regions(), got: self.regions.len() });
        }
        for (r, p) in self.regions.iter().enumerate() {
            if !(p.zeta.abs() < 1.0) {
                return Err(Error::InvalidParams(format!("zeta = {} in region {r} is outside (-1, 1)", p.zeta)));
            }
        }
        Ok(())
    }

    pub fn compile(&self, layout: &SpatialLayout) -> Result<GauModel> {
        self.validate(layout)?;
        let n = layout.n_regions();
        let mut psi = Vec::with_capacity(n);
        let mut residual_cov = Vec::with_capacity(n);
        let mut psi_inv_one = Vec::with_capacity(n);
        let mut s1 = Vec::with_capacity(n);
        for (r, p) in self.regions.iter().enumerate() {
            let m = p.psi.build(&layout.region_distances(r))?;
            let ones = DVector::from_element(m.dim(), 1.0);
            let w = m.solve(&ones);
            s1.push(w.sum());
            psi_inv_one.push(w);
            residual_cov.push(SpdMatrix::new(m.matrix() * (1.0 - p.zeta * p.zeta))?);
            psi.push(m);
        }
        let sigma = self.sigma.build(&layout.centroid_distances())?;
        if sigma.matrix().diagonal().iter().any(|v| (v - 1.0).abs() > 1e-9) {
            return Err(Error::InvalidParams("cross-region matrix must have unit diagonal".into()));
        }
        Ok(GauModel {
            zeta: self.regions.iter().map(|p| p.zeta).collect(),
            psi,
            residual_cov,
            psi_inv_one,
            s1,
            lambda: sigma.inverse(),
            sigma,
            ranges: (0..n).map(|r| layout.region_range(r)).collect(),
        })
    }

    /// `sum_r (1 + |Psi_r params|) + |Sigma params|`.
    pub fn n_params(&self, layout: &SpatialLayout) -> usize {
        let regional: usize =
            self.regions.iter().enumerate().map(|(r, p)| 1 + p.psi.n_params(layout.region_size(r))).sum();
        regional + self.sigma.n_params(layout.n_regions())
    }

    /// The skew-t parameters that reduce to this model: zero skewness,
    /// tied zeta and a very large `nu`.
    pub fn to_skt(&self, layout: &SpatialLayout, nu: f64) -> SktParams {
        let regions = self
            .regions
            .iter()
            .enumerate()
            .map(|(r, p)| {
                let d = layout.region_size(r);
                RegionParams { delta: vec![0.0; d], zeta: vec![p.zeta; d], nu, psi: p.psi.clone() }
            })
            .collect();
        SktParams { regions, sigma: self.sigma.clone(), zeta_mode: ZetaMode::Tied }
    }

    /// Starting values taken from skew-t starting values (mean zeta, same
    /// fine-scale and cross-region structures).
    pub fn from_skt(p: &SktParams) -> Self {
        let regions = p
            .regions
            .iter()
            .map(|r| GauRegionParams {
                zeta: r.zeta.iter().sum::<f64>() / r.zeta.len().max(1) as f64,
                psi: r.psi.clone(),
            })
            .collect();
        Self { regions, sigma: p.sigma.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct GauModel {
    pub zeta: Vec<f64>,
    pub psi: Vec<SpdMatrix>,
    /// `(1 - zeta_r^2) Psi_r`.
    pub residual_cov: Vec<SpdMatrix>,
    pub psi_inv_one: Vec<DVector<f64>>,
    /// `1^T Psi_r^{-1} 1`.
    pub s1: Vec<f64>,
    pub sigma: SpdMatrix,
    pub lambda: DMatrix<f64>,
    pub ranges: Vec<Range<usize>>,
}

impl GauModel {
    pub fn n_regions(&self) -> usize {
        self.zeta.len()
    }

    pub fn n_sites(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    /// Covariance of one observation vector.
    pub fn marginal_covariance(&self) -> DMatrix<f64> {
        let n = self.n_sites();
        let mut c = DMatrix::zeros(n, n);
        for (r, rr) in self.ranges.iter().enumerate() {
            for (s, rs) in self.ranges.iter().enumerate() {
                let v = self.zeta[r] * self.zeta[s] * self.sigma.matrix()[(r, s)];
                c.view_mut((rr.start, rs.start), (rr.len(), rs.len())).add_scalar_mut(v);
            }
            let mut block = c.view_mut((rr.start, rr.start), (rr.len(), rr.len()));
            block += self.residual_cov[r].matrix();
        }
        c
    }

    /// Posterior precision of the large-scale vector and the linear term
    /// for observation `y`.
    fn posterior_terms(&self, y: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n_regions();
        let mut p = self.lambda.clone();
        let mut v = DVector::zeros(n);
        for r in 0..n {
            let z = self.zeta[r];
            let a = 1.0 - z * z;
            p[(r, r)] += z * z * self.s1[r] / a;
            let block = y.rows(self.ranges[r].start, self.ranges[r].len());
            v[r] = z * self.psi_inv_one[r].dot(&block) / a;
        }
        (p, v)
    }
}

/// Simulate from the Gaussian model.
pub fn gau_simulate(params: &GauParams, layout: &SpatialLayout, n_times: usize, seed: u64) -> Result<Dataset> {
    let model = params.compile(layout)?;
    let n = layout.n_sites();
    let sigma_l = model.sigma.lower();
    let psi_l: Vec<DMatrix<f64>> = model.psi.iter().map(|p| p.lower()).collect();
    let rows: Vec<Vec<f64>> = (0..n_times)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, "gau-simulate", t as u64);
            let e = DVector::from_fn(model.n_regions(), |_, _| StandardNormal.sample(&mut rng));
            let x0 = &sigma_l * e;
            let mut row = Vec::with_capacity(n);
            for r in 0..model.n_regions() {
                let d = model.ranges[r].len();
                let u = &psi_l[r] * DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                let z = model.zeta[r];
                let a = (1.0 - z * z).sqrt();
                row.extend(u.iter().map(|ui| z * x0[r] + a * ui));
            }
            row
        })
        .collect();
    let y = DMatrix::from_fn(n_times, n, |t, s| rows[t][s]);
    Dataset::new(layout.clone(), y)
}

/// Conditional moments of the large-scale vector for every time point.
#[derive(Debug, Clone, PartialEq)]
pub struct GauMoments {
    /// `<X_{r,t}>`, T x R.
    pub mean: DMatrix<f64>,
    /// `<X_{r,t}^2>`, T x R.
    pub second: DMatrix<f64>,
    /// `<X_t X_t^T>` per time point.
    pub cross: Vec<DMatrix<f64>>,
}

impl GauMoments {
    pub fn cross_sum(&self) -> DMatrix<f64> {
        let n = self.mean.ncols();
        self.cross.iter().fold(DMatrix::zeros(n, n), |acc, c| acc + c)
    }
}

fn moments_from_rows(rows: Vec<(DVector<f64>, DMatrix<f64>)>, n: usize) -> GauMoments {
    let t = rows.len();
    let mut mean = DMatrix::zeros(t, n);
    let mut second = DMatrix::zeros(t, n);
    let mut cross = Vec::with_capacity(t);
    for (i, (m, c)) in rows.into_iter().enumerate() {
        for r in 0..n {
            mean[(i, r)] = m[r];
            second[(i, r)] = c[(r, r)];
        }
        cross.push(c);
    }
    GauMoments { mean, second, cross }
}

/// Exact E-step by linear-Gaussian conditioning.
pub fn gau_estep_exact(data: &Dataset, model: &GauModel) -> Result<GauMoments> {
    let n = model.n_regions();
    let rows = (0..data.n_times())
        .into_par_iter()
        .map(|t| {
            let (p, v) = model.posterior_terms(&data.row(t));
            let p = SpdMatrix::new(p)?;
            let mu = p.solve(&v);
            let c = p.inverse() + &mu * mu.transpose();
            Ok((mu, c))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(moments_from_rows(rows, n))
}

/// Gibbs E-step over the Gaussian full conditionals, averaging `sweeps`
/// draws after `burn_in` discarded ones.
pub fn gau_estep_gibbs(data: &Dataset, model: &GauModel, sweeps: usize, burn_in: usize, seed: u64) -> Result<GauMoments> {
    if sweeps == 0 {
        return Err(Error::invalid("Gibbs E-step needs at least one retained sweep"));
    }
    let n = model.n_regions();
    let rows: Vec<(DVector<f64>, DMatrix<f64>)> = (0..data.n_times())
        .into_par_iter()
        .map(|t| {
            let (p, v) = model.posterior_terms(&data.row(t));
            let mut rng = rng::stream(seed, "gau-estep-time", t as u64);
            let mut x = DVector::zeros(n);
            let mut sum = DVector::zeros(n);
            let mut sum2 = DMatrix::zeros(n, n);
            for k in 0..(burn_in + sweeps) {
                for r in 0..n {
                    let off: f64 = (0..n).filter(|&j| j != r).map(|j| p[(r, j)] * x[j]).sum();
                    let mean = (v[r] - off) / p[(r, r)];
                    let e: f64 = StandardNormal.sample(&mut rng);
                    x[r] = mean + e / p[(r, r)].sqrt();
                }
                if k >= burn_in {
                    sum += &x;
                    sum2 += &x * x.transpose();
                }
            }
            let m = sweeps as f64;
            (sum / m, sum2 / m)
        })
        .collect();
    Ok(moments_from_rows(rows, n))
}

/// Per-region sufficient statistics of the Gaussian M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct GauRegionStats {
    /// `sum_t y y^T`.
    pub s_yy: DMatrix<f64>,
    /// `sum_t <X> y`.
    pub s_xy: DVector<f64>,
    /// `sum_t <X^2>`.
    pub s_xx: f64,
}

impl GauRegionStats {
    /// `B(zeta) = S_yy - zeta (s_xy 1^T + 1 s_xy^T) + zeta^2 s_xx 1 1^T`.
    pub fn b_matrix(&self, zeta: f64) -> DMatrix<f64> {
        let d = self.s_xy.len();
        DMatrix::from_fn(d, d, |i, j| {
            self.s_yy[(i, j)] - zeta * (self.s_xy[i] + self.s_xy[j]) + zeta * zeta * self.s_xx
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GauStats {
    pub n_times: usize,
    pub regions: Vec<GauRegionStats>,
    pub cross_sum: DMatrix<f64>,
}

impl GauStats {
    pub fn from_moments(data: &Dataset, m: &GauMoments) -> Result<Self> {
        let layout = data.layout();
        let n = layout.n_regions();
        if m.mean.nrows() != data.n_times() || m.mean.ncols() != n {
            return Err(Error::DimensionMismatch { expected: data.n_times(), got: m.mean.nrows() });
        }
        let regions = (0..n)
            .map(|r| {
                let range = layout.region_range(r);
                let block = data.values().columns(range.start, range.len());
                let s_yy = block.transpose() * block;
                let s_xy = block.transpose() * m.mean.column(r);
                GauRegionStats { s_yy, s_xy, s_xx: m.second.column(r).sum() }
            })
            .collect();
        Ok(Self { n_times: data.n_times(), regions, cross_sum: m.cross_sum() })
    }
}

/// Expected complete-data log-likelihood of the Gaussian model, constants
/// dropped.
pub fn gau_q_value(stats: &GauStats, model: &GauModel) -> f64 {
    let tf = stats.n_times as f64;
    let mut q = 0.0;
    for (r, s) in stats.regions.iter().enumerate() {
        let z = model.zeta[r];
        let a = 1.0 - z * z;
        let d = s.s_xy.len() as f64;
        let tr = model.psi[r].inverse().component_mul(&s.b_matrix(z)).sum();
        q += -0.5 * tf * d * a.ln() - 0.5 * tf * model.psi[r].log_det() - tr / (2.0 * a);
    }
    q - 0.5 * tf * model.sigma.log_det() - 0.5 * model.lambda.component_mul(&stats.cross_sum).sum()
}

#[derive(Debug, Clone)]
pub struct GauMStepOutcome {
    pub params: GauParams,
    pub flags: Vec<String>,
}

/// Objective of the zeta update for fixed `Psi^{-1}`.
fn zeta_objective(s: &GauRegionStats, tf: f64, psi_inv: &DMatrix<f64>, zeta: f64) -> f64 {
    let a = 1.0 - zeta * zeta;
    let d = s.s_xy.len() as f64;
    -0.5 * tf * d * a.ln() - psi_inv.component_mul(&s.b_matrix(zeta)).sum() / (2.0 * a)
}

/// One M-step: Psi, zeta per region, then Sigma.
pub fn gau_mstep(stats: &GauStats, current: &GauParams, layout: &SpatialLayout, cfg: &MStepConfig) -> Result<GauMStepOutcome> {
    current.validate(layout)?;
    let n_t = stats.n_times;
    if n_t == 0 {
        return Err(Error::invalid("cannot run the M-step on an empty data set"));
    }
    let tf = n_t as f64;
    let updates = (0..current.n_regions())
        .into_par_iter()
        .map(|r| {
            let s = &stats.regions[r];
            let mut p = current.regions[r].clone();
            let mut flags = Vec::new();
            let dist = layout.region_distances(r);
            let target = s.b_matrix(p.zeta) / (1.0 - p.zeta * p.zeta);
            match &p.psi {
                CorrelationModel::Matern(spec) => {
                    if dist.nrows() > 1 {
                        let (spec, ok) = matern_range_update(&dist, spec, &target, n_t, cfg);
                        if !ok {
                            flags.push(format!("region {r}: fine-scale range search did not converge"));
                        }
                        p.psi = CorrelationModel::Matern(spec);
                    }
                }
                CorrelationModel::Free { .. } => {
                    let m = target / tf;
                    if SpdMatrix::new(m.clone()).is_ok() {
                        p.psi = CorrelationModel::free(&m);
                    } else {
                        flags.push(format!("region {r}: non-parametric Psi not positive definite, kept previous"));
                    }
                }
            }
            let psi_inv = p.psi.build(&dist)?.inverse();
            let before = zeta_objective(s, tf, &psi_inv, p.zeta);
            let opt = maximize_scalar(|z| zeta_objective(s, tf, &psi_inv, z), -BOUND, BOUND, cfg.scan_points, cfg.x_tol);
            if opt.value >= before {
                p.zeta = opt.x;
            }
            if !opt.converged {
                flags.push(format!("region {r}: zeta search did not converge"));
            }
            Ok((p, flags))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut flags = Vec::new();
    let mut regions = Vec::with_capacity(updates.len());
    for (p, f) in updates {
        regions.push(p);
        flags.extend(f);
    }
    let sigma = update_sigma(&stats.cross_sum, n_t, &current.sigma, &layout.centroid_distances(), cfg, &mut flags);
    Ok(GauMStepOutcome { params: GauParams { regions, sigma }, flags })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GauEStep {
    Exact,
    Gibbs { sweeps: usize, burn_in: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GauFitConfig {
    pub estep: GauEStep,
    pub mstep: MStepConfig,
    pub tol: f64,
    pub max_iterations: usize,
    pub abort_after: usize,
}

impl Default for GauFitConfig {
    fn default() -> Self {
        Self { estep: GauEStep::Exact, mstep: MStepConfig::default(), tol: 1e-6, max_iterations: 500, abort_after: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GauIteration {
    pub iteration: usize,
    pub params: GauParams,
    pub q_value: Option<f64>,
    pub loglik: f64,
    pub aitken_limit: Option<f64>,
    pub flags: Vec<String>,
}

impl GauIteration {
    pub const CSV_HEADER: &'static str = "iteration,q_value,loglik,aitken_limit";

    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        format!("{},{},{:.16e},{}", self.iteration, opt(self.q_value), self.loglik, opt(self.aitken_limit))
    }
}

#[derive(Debug, Clone)]
pub struct GauFitOutcome {
    pub params: GauParams,
    pub status: FitStatus,
    pub loglik: LikelihoodEstimate,
    pub trace: Vec<GauIteration>,
}

/// EM for the Gaussian model, stopped on the closed-form log-likelihood.
pub fn gau_fit(data: &Dataset, init: &GauParams, cfg: &GauFitConfig) -> Result<GauFitOutcome> {
    if !(cfg.tol > 0.0) {
        return Err(Error::invalid("Aitken tolerance must be positive"));
    }
    let layout = data.layout();
    let mut params = init.clone();
    let mut model = params.compile(layout)?;
    let mut lik = gau_loglik(data, &params)?;
    let mut monitor = Monitor::new(cfg.tol, cfg.abort_after);
    monitor.push(lik.value, 0.0);
    let mut trace = vec![GauIteration {
        iteration: 0,
        params: params.clone(),
        q_value: None,
        loglik: lik.value,
        aitken_limit: None,
        flags: Vec::new(),
    }];
    let mut status = FitStatus::MaxIterations;
    for k in 0..cfg.max_iterations {
        let moments = match cfg.estep {
            GauEStep::Exact => gau_estep_exact(data, &model)?,
            GauEStep::Gibbs { sweeps, burn_in, seed } => {
                gau_estep_gibbs(data, &model, sweeps, burn_in, rng::derive_seed(seed, "gau-estep", k as u64))?
            }
        };
        let stats = GauStats::from_moments(data, &moments)?;
        let out = gau_mstep(&stats, &params, layout, &cfg.mstep)?;
        params = out.params;
        model = params.compile(layout)?;
        lik = gau_loglik(data, &params)?;
        let step = monitor.push(lik.value, 0.0);
        let limit = match step {
            MonitorStep::Continue(l) | MonitorStep::Converged(l) => l,
            MonitorStep::Abort => None,
        };
        log::debug!("GAU iteration {}: loglik {:.6}", k + 1, lik.value);
        trace.push(GauIteration {
            iteration: k + 1,
            params: params.clone(),
            q_value: Some(gau_q_value(&stats, &model)),
            loglik: lik.value,
            aitken_limit: limit,
            flags: out.flags,
        });
        match step {
            MonitorStep::Converged(_) => {
                status = FitStatus::Converged;
                break;
            }
            MonitorStep::Abort => {
                status = FitStatus::Aborted;
                break;
            }
            MonitorStep::Continue(_) => {}
        }
    }
    Ok(GauFitOutcome { params, status, loglik: lik, trace })
}
