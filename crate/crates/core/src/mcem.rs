//! Monte Carlo EM for the skew-t model: Metropolis-within-Gibbs E-step,
//! coordinate M-step, growing chain lengths and Aitken stopping.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matern_from_distances, median_offdiagonal, to_correlation, MaternSpec, SpatialLayout, SpdMatrix};
use crate::model::{
    CompiledModel, CorrelationModel, Dataset, LatentState, RegionModel, RegionParams, RegionScalars, SktParams,
    ZetaMode,
};
use crate::optimize::{bisect_decreasing, maximize_scalar, RootOutcome};
use crate::rng::{self, Stream};
use crate::selection::{skt_marginal_loglik, LikelihoodEstimate};
use crate::special::{digamma, ln_gamma, sample_positive_truncated_normal, SQRT_2_OVER_PI};

pub const BOUND: f64 = 1.0 - 1e-6;

/// Chain-length schedule and seed of the Monte Carlo E-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GibbsConfig {
    pub m0: usize,
    pub growth: f64,
    pub m_max: usize,
    pub burn_in_fraction: f64,
    pub seed: u64,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self { m0: 100, growth: 1.1, m_max: 2000, burn_in_fraction: 0.2, seed: 1 }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m0 < 50 {
            return Err(Error::invalid(format!("initial chain length must be >= 50, got {}", self.m0)));
        }
        if !(1.0..=1.5).contains(&self.growth) {
            return Err(Error::invalid(format!("growth factor must lie in [1, 1.5], got {}", self.growth)));
        }
        if self.m_max < self.m0 {
            return Err(Error::invalid("maximum chain length is below the initial length"));
        }
        if !(0.0..0.5).contains(&self.burn_in_fraction) {
            return Err(Error::invalid("burn-in fraction must lie in [0, 0.5)"));
        }
        Ok(())
    }

    /// `min(M_max, ceil(M0 growth^k))`.
    pub fn chain_length(&self, k: usize) -> usize {
        // guard against 100 * 1.1 = 110.00000000000001
        let m = (self.m0 as f64 * self.growth.powi(k as i32) * (1.0 - 1e-12)).ceil();
        if m >= self.m_max as f64 {
            self.m_max
        } else {
            m as usize
        }
    }

    pub fn burn_in(&self, m: usize) -> usize {
        (self.burn_in_fraction * m as f64).ceil() as usize
    }
}

/// Monte Carlo averages of the E-step. Per-(t, r) arrays are `T x R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EStepMoments {
    pub z: DMatrix<f64>,
    pub log_z: DMatrix<f64>,
    pub z_eta0: DMatrix<f64>,
    pub z_eta1: DMatrix<f64>,
    pub z_eta0_sq: DMatrix<f64>,
    pub z_eta1_sq: DMatrix<f64>,
    pub z_eta0_eta1: DMatrix<f64>,
    /// Per t, `<(eta0 . sqrt Z)(eta0 . sqrt Z)^T>`.
    pub cross: Vec<DMatrix<f64>>,
    /// MH acceptance rate of the Z move, per region.
    pub acceptance: Vec<f64>,
    pub sweeps: usize,
}

impl EStepMoments {
    pub fn n_times(&self) -> usize {
        self.z.nrows()
    }

    pub fn n_regions(&self) -> usize {
        self.z.ncols()
    }
}

/// Gibbs chain state plus the per-region data scalars of one time point.
#[derive(Debug, Clone)]
pub struct ChainContext<'a> {
    pub model: &'a CompiledModel,
    pub scalars: Vec<RegionScalars>,
}

impl<'a> ChainContext<'a> {
    pub fn new(model: &'a CompiledModel, y: &DVector<f64>) -> Self {
        let scalars = model.regions.iter().enumerate().map(|(r, m)| m.data_scalars(&model.block(y, r))).collect();
        Self { model, scalars }
    }

    fn residual_quad(&self, state: &LatentState, r: usize) -> f64 {
        self.model.regions[r].residual_quad(&self.scalars[r], state.eta0[r], state.eta1[r])
    }

    /// Initial state: `Z = 1`, `eta0 = 0`, `eta1 = sqrt(2/pi)`.
    pub fn initial_state(&self) -> LatentState {
        let n = self.model.n_regions();
        LatentState { eta0: vec![0.0; n], eta1: vec![SQRT_2_OVER_PI; n], z: vec![1.0; n] }
    }

    /// `log w(Z)` of the independence MH move for `Z_r` (target over
    /// proposal), other coordinates taken from `state`.
    pub fn z_log_weight(&self, state: &LatentState, r: usize, z: f64) -> f64 {
        let lam = &self.model.lambda;
        let e0 = state.eta0[r];
        let mut cross = 0.0;
        for j in 0..self.model.n_regions() {
            if j != r {
                cross += state.z[j].sqrt() * state.eta0[j] * lam[(r, j)];
            }
        }
        -0.5 * z * state.eta1[r] * state.eta1[r] - 0.5 * (z * e0 * e0 * lam[(r, r)] + 2.0 * z.sqrt() * e0 * cross)
    }

    /// Gamma proposal `(shape, rate)` for `Z_r`.
    pub fn z_proposal(&self, state: &LatentState, r: usize) -> (f64, f64) {
        let m = &self.model.regions[r];
        (0.5 * (m.nu + m.d as f64) + 1.0, 0.5 * (self.residual_quad(state, r) + m.nu))
    }

    /// Unnormalized log full conditional of `Z_r`.
    pub fn z_log_target(&self, state: &LatentState, r: usize, z: f64) -> f64 {
        let m = &self.model.regions[r];
        let q = self.residual_quad(state, r);
        0.5 * (m.nu + m.d as f64) * z.ln() - 0.5 * z * (q + m.nu) + self.z_log_weight(state, r, z)
    }

    /// One independence Metropolis-Hastings update of `Z_r`. Returns whether
    /// the candidate was accepted.
    pub fn mh_step_z<R: Rng + ?Sized>(&self, state: &mut LatentState, r: usize, rng: &mut R) -> bool {
        let (shape, rate) = self.z_proposal(state, r);
        let gamma = Gamma::new(shape, 1.0 / rate).expect("proposal parameters are positive");
        let cand: f64 = gamma.sample(rng);
        if !(cand > 0.0) {
            return false;
        }
        let log_ratio = self.z_log_weight(state, r, cand) - self.z_log_weight(state, r, state.z[r]);
        let u: f64 = rng.random();
        if log_ratio >= 0.0 || u.ln() < log_ratio {
            state.z[r] = cand;
            true
        } else {
            false
        }
    }

    /// Mean and variance of the Gaussian full conditional of `eta0_r`.
    pub fn eta0_conditional(&self, state: &LatentState, r: usize) -> (f64, f64) {
        let m = &self.model.regions[r];
        let s = &self.scalars[r];
        let lam = &self.model.lambda;
        let mut neighbours = 0.0;
        for j in 0..self.model.n_regions() {
            if j != r {
                neighbours += state.eta0[j] * state.z[j].sqrt() * lam[(r, j)];
            }
        }
        let z = state.z[r];
        let denom = m.za + lam[(r, r)];
        let mean = (s.zy - state.eta1[r] * m.ce - neighbours / z.sqrt()) / denom;
        (mean, 1.0 / (z * denom))
    }

    pub fn sample_eta0<R: Rng + ?Sized>(&self, state: &mut LatentState, r: usize, rng: &mut R) -> Result<()> {
        let (mean, var) = self.eta0_conditional(state, r);
        if !(var > 0.0) {
            return Err(Error::NonPositiveVariance(var));
        }
        let e: f64 = StandardNormal.sample(rng);
        state.eta0[r] = mean + var.sqrt() * e;
        Ok(())
    }

    /// Location and scale (squared) of the positive-truncated normal full
    /// conditional of `eta1_r`.
    pub fn eta1_conditional(&self, state: &LatentState, r: usize) -> (f64, f64) {
        let m = &self.model.regions[r];
        let s = &self.scalars[r];
        let denom = 1.0 + m.cc;
        ((s.cy - state.eta0[r] * m.ce) / denom, 1.0 / (state.z[r] * denom))
    }

    pub fn sample_eta1<R: Rng + ?Sized>(&self, state: &mut LatentState, r: usize, rng: &mut R) {
        let (mean, var) = self.eta1_conditional(state, r);
        state.eta1[r] = sample_positive_truncated_normal(mean, var.sqrt(), rng);
    }

    /// One sweep: Z for every region, then eta0 in region order (using
    /// already-updated neighbours), then eta1. Adds MH acceptances to
    /// `accepted`.
    pub fn sweep<R: Rng + ?Sized>(&self, state: &mut LatentState, rng: &mut R, accepted: &mut [usize]) -> Result<()> {
        let n = self.model.n_regions();
        for r in 0..n {
            if self.mh_step_z(state, r, rng) {
                accepted[r] += 1;
            }
        }
        for r in 0..n {
            self.sample_eta0(state, r, rng)?;
        }
        for r in 0..n {
            self.sample_eta1(state, r, rng);
        }
        Ok(())
    }
}

fn check_finite(state: &LatentState, time: usize, sweep: usize) -> Result<()> {
    for r in 0..state.z.len() {
        let ok = state.z[r].is_finite() && state.z[r] > 0.0 && state.eta0[r].is_finite() && state.eta1[r].is_finite();
        if !ok {
            return Err(Error::NonFiniteState { region: r, time, sweep });
        }
    }
    Ok(())
}

struct TimeMoments {
    values: [Vec<f64>; 7],
    cross: DMatrix<f64>,
    accepted: Vec<usize>,
}

/// Run one chain for time `t` and average the moment functions over the
/// retained sweeps.
fn chain_moments(ctx: &ChainContext, t: usize, burn_in: usize, sweeps: usize, rng: &mut Stream) -> Result<TimeMoments> {
    let n = ctx.model.n_regions();
    let mut state = ctx.initial_state();
    let mut accepted = vec![0usize; n];
    let mut values: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut cross = DMatrix::zeros(n, n);
    let mut w = vec![0.0; n];
    for m in 0..(burn_in + sweeps) {
        ctx.sweep(&mut state, rng, &mut accepted)?;
        check_finite(&state, t, m)?;
        if m < burn_in {
            continue;
        }
        for r in 0..n {
            let (z, e0, e1) = (state.z[r], state.eta0[r], state.eta1[r]);
            values[0][r] += z;
            values[1][r] += z.ln();
            values[2][r] += z * e0;
            values[3][r] += z * e1;
            values[4][r] += z * e0 * e0;
            values[5][r] += z * e1 * e1;
            values[6][r] += z * e0 * e1;
            w[r] = e0 * z.sqrt();
        }
        for i in 0..n {
            for j in 0..n {
                cross[(i, j)] += w[i] * w[j];
            }
        }
    }
    let inv = 1.0 / sweeps.max(1) as f64;
    for v in values.iter_mut() {
        v.iter_mut().for_each(|x| *x *= inv);
    }
    cross *= inv;
    Ok(TimeMoments { values, cross, accepted })
}

/// Monte Carlo E-step. Time point `t` runs its own chain on the stream
/// `(seed, iteration, t)`, so results do not depend on scheduling.
pub fn gibbs_estep(
    data: &Dataset,
    model: &CompiledModel,
    sweeps: usize,
    burn_in: usize,
    seed: u64,
    iteration: u64,
) -> Result<EStepMoments> {
    if sweeps == 0 {
        return Err(Error::invalid("the E-step needs at least one retained sweep"));
    }
    let n_t = data.n_times();
    let n = model.n_regions();
    let iter_seed = rng::derive_seed(seed, "estep", iteration);
    let per_t: Vec<TimeMoments> = (0..n_t)
        .into_par_iter()
        .map(|t| {
            let ctx = ChainContext::new(model, &data.row(t));
            let mut rng = rng::stream(iter_seed, "estep-time", t as u64);
            chain_moments(&ctx, t, burn_in, sweeps, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mats: [DMatrix<f64>; 7] = std::array::from_fn(|_| DMatrix::zeros(n_t, n));
    let mut accepted = vec![0usize; n];
    let mut cross = Vec::with_capacity(n_t);
    for (t, tm) in per_t.into_iter().enumerate() {
        for (k, mat) in mats.iter_mut().enumerate() {
            for r in 0..n {
                mat[(t, r)] = tm.values[k][r];
            }
        }
        for r in 0..n {
            accepted[r] += tm.accepted[r];
        }
        cross.push(tm.cross);
    }
    let total = (n_t * (burn_in + sweeps)).max(1) as f64;
    let [z, log_z, z_eta0, z_eta1, z_eta0_sq, z_eta1_sq, z_eta0_eta1] = mats;
    Ok(EStepMoments {
        z,
        log_z,
        z_eta0,
        z_eta1,
        z_eta0_sq,
        z_eta1_sq,
        z_eta0_eta1,
        cross,
        acceptance: accepted.iter().map(|&a| a as f64 / total).collect(),
        sweeps,
    })
}

/// Data-weighted sums of one region feeding `B_r` and the Q function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    /// `sum_t <Z> y y^T`.
    pub s_yy: DMatrix<f64>,
    /// `sum_t <Z eta0> y`.
    pub s_y0: DVector<f64>,
    /// `sum_t <Z eta1> y`.
    pub s_y1: DVector<f64>,
    pub s00: f64,
    pub s01: f64,
    pub s11: f64,
    pub sum_z: f64,
    pub sum_log_z: f64,
}

impl RegionStats {
    /// `B(zeta, c)`, with `c = Delta_zeta delta`.
    pub fn b_matrix(&self, zeta: &DVector<f64>, c: &DVector<f64>) -> DMatrix<f64> {
        let d = zeta.len();
        DMatrix::from_fn(d, d, |i, j| {
            self.s_yy[(i, j)] - zeta[i] * self.s_y0[j] - self.s_y0[i] * zeta[j] - c[i] * self.s_y1[j]
                - self.s_y1[i] * c[j]
                + self.s00 * zeta[i] * zeta[j]
                + self.s01 * (c[i] * zeta[j] + zeta[i] * c[j])
                + self.s11 * c[i] * c[j]
        })
    }

    /// `tr(A D B D)` with `D = Delta_{zeta,delta}^{-1}` and `A = Psi^{-1}`.
    pub fn scaled_trace(&self, zeta: &DVector<f64>, delta: &DVector<f64>, a: &DMatrix<f64>) -> f64 {
        let d = zeta.len();
        let mut c = DVector::zeros(d);
        let mut dinv = DVector::zeros(d);
        for i in 0..d {
            let az = (1.0 - zeta[i] * zeta[i]).sqrt();
            c[i] = az * delta[i];
            dinv[i] = 1.0 / (az * (1.0 - delta[i] * delta[i]).sqrt());
        }
        let b = self.b_matrix(zeta, &c);
        let mut tr = 0.0;
        for i in 0..d {
            for j in 0..d {
                tr += a[(i, j)] * dinv[j] * b[(j, i)] * dinv[i];
            }
        }
        tr
    }

    /// `Delta^{-1} B Delta^{-1}`.
    pub fn scaled_b(&self, zeta: &DVector<f64>, delta: &DVector<f64>) -> DMatrix<f64> {
        let a = zeta.map(|z| (1.0 - z * z).sqrt());
        let c = a.component_mul(delta);
        let dinv = DVector::from_fn(zeta.len(), |i, _| 1.0 / (a[i] * (1.0 - delta[i] * delta[i]).sqrt()));
        let b = self.b_matrix(zeta, &c);
        DMatrix::from_fn(zeta.len(), zeta.len(), |i, j| dinv[i] * b[(i, j)] * dinv[j])
    }
}

/// Everything the M-step and the Q function need from data and moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub n_times: usize,
    pub regions: Vec<RegionStats>,
    /// `sum_t <(eta0 . sqrt Z)(eta0 . sqrt Z)^T>`.
    pub cross_sum: DMatrix<f64>,
}

impl SufficientStats {
    pub fn from_moments(data: &Dataset, m: &EStepMoments) -> Result<Self> {
        let n_t = data.n_times();
        if m.n_times() != n_t || m.n_regions() != data.layout().n_regions() {
            return Err(Error::DimensionMismatch { expected: n_t, got: m.n_times() });
        }
        let layout = data.layout();
        let regions = (0..layout.n_regions())
            .map(|r| {
                let d = layout.region_size(r);
                let mut s = RegionStats {
                    s_yy: DMatrix::zeros(d, d),
                    s_y0: DVector::zeros(d),
                    s_y1: DVector::zeros(d),
                    s00: 0.0,
                    s01: 0.0,
                    s11: 0.0,
                    sum_z: 0.0,
                    sum_log_z: 0.0,
                };
                for t in 0..n_t {
                    let y = data.region_block(t, r);
                    s.s_yy.ger(m.z[(t, r)], &y, &y, 1.0);
                    s.s_y0.axpy(m.z_eta0[(t, r)], &y, 1.0);
                    s.s_y1.axpy(m.z_eta1[(t, r)], &y, 1.0);
                    s.s00 += m.z_eta0_sq[(t, r)];
                    s.s01 += m.z_eta0_eta1[(t, r)];
                    s.s11 += m.z_eta1_sq[(t, r)];
                    s.sum_z += m.z[(t, r)];
                    s.sum_log_z += m.log_z[(t, r)];
                }
                s
            })
            .collect();
        let n = layout.n_regions();
        let mut cross_sum = DMatrix::zeros(n, n);
        for c in &m.cross {
            cross_sum += c;
        }
        Ok(Self { n_times: n_t, regions, cross_sum })
    }

    /// Statistics of a single completed data set (each latent draw
    /// standing in for its own expectation).
    pub fn from_latents(data: &Dataset, latents: &[LatentState]) -> Result<Self> {
        let n_t = data.n_times();
        if latents.len() != n_t {
            return Err(Error::DimensionMismatch { expected: n_t, got: latents.len() });
        }
        let n = data.layout().n_regions();
        let mut m = EStepMoments {
            z: DMatrix::zeros(n_t, n),
            log_z: DMatrix::zeros(n_t, n),
            z_eta0: DMatrix::zeros(n_t, n),
            z_eta1: DMatrix::zeros(n_t, n),
            z_eta0_sq: DMatrix::zeros(n_t, n),
            z_eta1_sq: DMatrix::zeros(n_t, n),
            z_eta0_eta1: DMatrix::zeros(n_t, n),
            cross: Vec::with_capacity(n_t),
            acceptance: vec![1.0; n],
            sweeps: 1,
        };
        for (t, l) in latents.iter().enumerate() {
            l.validate()?;
            for r in 0..n {
                let (z, e0, e1) = (l.z[r], l.eta0[r], l.eta1[r]);
                m.z[(t, r)] = z;
                m.log_z[(t, r)] = z.ln();
                m.z_eta0[(t, r)] = z * e0;
                m.z_eta1[(t, r)] = z * e1;
                m.z_eta0_sq[(t, r)] = z * e0 * e0;
                m.z_eta1_sq[(t, r)] = z * e1 * e1;
                m.z_eta0_eta1[(t, r)] = z * e0 * e1;
            }
            let w = DVector::from_fn(n, |r, _| l.eta0[r] * l.z[r].sqrt());
            m.cross.push(&w * w.transpose());
        }
        Self::from_moments(data, &m)
    }
}

fn nu_terms(nu: f64, tf: f64, s: &RegionStats, d: usize) -> f64 {
    tf * (0.5 * nu * (0.5 * nu).ln() - ln_gamma(0.5 * nu)) + 0.5 * (nu + d as f64) * s.sum_log_z - 0.5 * nu * s.sum_z
}

/// Region part of Q: everything except the cross-region terms.
pub fn q_region(stats: &RegionStats, n_times: usize, m: &RegionModel) -> f64 {
    let tf = n_times as f64;
    let a = m.psi.inverse();
    let trace = stats.scaled_trace(&m.zeta, &m.delta, &a);
    let logs: f64 = m.zeta.iter().chain(m.delta.iter()).map(|x| (1.0 - x * x).ln()).sum();
    nu_terms(m.nu, tf, stats, m.d) - 0.5 * tf * logs - 0.5 * tf * m.psi.log_det() - 0.5 * stats.s11 - 0.5 * trace
}

/// Cross-region part of Q.
pub fn q_cross(cross_sum: &DMatrix<f64>, n_times: usize, sigma: &SpdMatrix) -> f64 {
    let inv = sigma.inverse();
    -0.5 * n_times as f64 * sigma.log_det() - 0.5 * inv.component_mul(cross_sum).sum()
}

/// Expected complete-data log-likelihood `Q(theta)` (additive constants
/// dropped, matching [`crate::model::complete_data_loglik`]).
pub fn q_value(stats: &SufficientStats, model: &CompiledModel) -> f64 {
    let regional: f64 = stats
        .regions
        .iter()
        .zip(&model.regions)
        .map(|(s, m)| q_region(s, stats.n_times, m))
        .sum();
    regional + q_cross(&stats.cross_sum, stats.n_times, &model.sigma)
}

/// Analytic partial derivatives of Q.
#[derive(Debug, Clone, PartialEq)]
pub struct QGradient {
    pub nu: Vec<f64>,
    pub zeta: Vec<DVector<f64>>,
    pub delta: Vec<DVector<f64>>,
}

/// Partials of `Q` with respect to `nu_r`, every `zeta_{r,s}` and every
/// `delta_{r,s}` (free coordinates; sum the zeta entries for tied mode).
pub fn q_gradient(stats: &SufficientStats, model: &CompiledModel) -> QGradient {
    let tf = stats.n_times as f64;
    let mut out = QGradient { nu: Vec::new(), zeta: Vec::new(), delta: Vec::new() };
    for (s, m) in stats.regions.iter().zip(&model.regions) {
        let nu = m.nu;
        out.nu.push(
            tf * (0.5 * (0.5 * nu).ln() + 0.5 - 0.5 * digamma(0.5 * nu)) + 0.5 * s.sum_log_z - 0.5 * s.sum_z,
        );
        let d = m.d;
        let a = m.zeta.map(|z| (1.0 - z * z).sqrt());
        let c = a.component_mul(&m.delta);
        let dinv = DVector::from_fn(d, |i, _| 1.0 / m.scale[i]);
        let ainv = m.psi.inverse();
        let mm = DMatrix::from_fn(d, d, |i, j| dinv[i] * ainv[(i, j)] * dinv[j]);
        let b = s.b_matrix(&m.zeta, &c);
        let mb = &mm * &b;
        let m_y0 = &mm * &s.s_y0;
        let m_y1 = &mm * &s.s_y1;
        let m_z = &mm * &m.zeta;
        let m_c = &mm * &c;
        let mut gz = DVector::zeros(d);
        let mut gd = DVector::zeros(d);
        for k in 0..d {
            let (zk, dk) = (m.zeta[k], m.delta[k]);
            let via_c = -m_y1[k] + s.s01 * m_z[k] + s.s11 * m_c[k];
            let kappa = dk / (1.0 - dk * dk);
            let df_dd = 2.0 * kappa * mb[(k, k)] + 2.0 * a[k] * via_c;
            gd[k] = tf * kappa - 0.5 * df_dd;
            let gamma = -dk * zk / a[k];
            let rho = zk / (1.0 - zk * zk);
            let direct = -m_y0[k] + s.s00 * m_z[k] + s.s01 * m_c[k];
            let df_dz = 2.0 * rho * mb[(k, k)] + 2.0 * direct + 2.0 * gamma * via_c;
            gz[k] = tf * rho - 0.5 * df_dz;
        }
        out.zeta.push(gz);
        out.delta.push(gd);
    }
    out
}

/// M-step search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MStepConfig {
    pub nu_bounds: (f64, f64),
    pub scan_points: usize,
    pub x_tol: f64,
    pub coordinate_tol: f64,
    pub max_coordinate_sweeps: usize,
}

impl Default for MStepConfig {
    fn default() -> Self {
        Self { nu_bounds: (0.2, 500.0), scan_points: 41, x_tol: 1e-10, coordinate_tol: 1e-10, max_coordinate_sweeps: 200 }
    }
}

#[derive(Debug, Clone)]
pub struct MStepOutcome {
    pub params: SktParams,
    pub flags: Vec<String>,
}

/// Root of `log(nu/2) + 1 - digamma(nu/2) + mean(<log Z> - <Z>) = 0`.
pub fn solve_nu(mean_log_z_minus_z: f64, bounds: (f64, f64)) -> RootOutcome {
    bisect_decreasing(
        |nu| (0.5 * nu).ln() + 1.0 - digamma(0.5 * nu) + mean_log_z_minus_z,
        bounds.0,
        bounds.1,
        1e-13,
    )
}

/// Maximize `-(T/2) log|C(phi)| - tr(C(phi)^{-1} S)/2` over the Matérn range.
pub fn matern_range_update(
    distances: &DMatrix<f64>,
    spec: &MaternSpec,
    target: &DMatrix<f64>,
    n_times: usize,
    cfg: &MStepConfig,
) -> (MaternSpec, bool) {
    let tf = n_times as f64;
    let objective = |log_phi: f64| {
        let s = MaternSpec { range_km: log_phi.exp(), ..*spec };
        match SpdMatrix::new(matern_from_distances(distances, &s)) {
            Ok(c) => -0.5 * tf * c.log_det() - 0.5 * c.inverse().component_mul(target).sum(),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let med = median_offdiagonal(distances).max(1e-6);
    let max = distances.max().max(med);
    let lo = (1e-3 * med).ln();
    let hi = (50.0 * max).ln();
    let current = objective(spec.range_km.ln());
    let opt = maximize_scalar(objective, lo, hi, cfg.scan_points, cfg.x_tol);
    if opt.value >= current {
        (MaternSpec { range_km: opt.x.exp(), ..*spec }, opt.converged)
    } else {
        (*spec, false)
    }
}

struct RegionUpdate {
    params: RegionParams,
    flags: Vec<String>,
}

fn region_objective(s: &RegionStats, tf: f64, zeta: &DVector<f64>, delta: &DVector<f64>, a: &DMatrix<f64>) -> f64 {
    let logs: f64 = zeta.iter().chain(delta.iter()).map(|x| (1.0 - x * x).ln()).sum();
    -0.5 * tf * logs - 0.5 * s.scaled_trace(zeta, delta, a)
}

/// Coordinate-wise maximization of `objective(v)` over entries of `v` in
/// `(-BOUND, BOUND)`. Returns whether the sweep budget sufficed.
fn coordinate_ascent<F: Fn(&DVector<f64>) -> f64>(v: &mut DVector<f64>, objective: F, cfg: &MStepConfig) -> bool {
    for _ in 0..cfg.max_coordinate_sweeps {
        let mut change = 0.0f64;
        for k in 0..v.len() {
            let old = v[k];
            let before = objective(v);
            let mut trial = v.clone();
            let opt = maximize_scalar(
                |x| {
                    trial[k] = x;
                    objective(&trial)
                },
                -BOUND,
                BOUND,
                cfg.scan_points,
                cfg.x_tol,
            );
            if opt.value > before {
                v[k] = opt.x;
                change = change.max((opt.x - old).abs());
            }
        }
        if change < cfg.coordinate_tol {
            return true;
        }
    }
    false
}

fn update_region(
    r: usize,
    stats: &RegionStats,
    n_times: usize,
    current: &RegionParams,
    zeta_mode: ZetaMode,
    distances: &DMatrix<f64>,
    cfg: &MStepConfig,
) -> Result<RegionUpdate> {
    let tf = n_times as f64;
    let d = current.delta.len();
    let mut p = current.clone();
    let mut flags = Vec::new();

    // nu
    let mean = (stats.sum_log_z - stats.sum_z) / tf;
    p.nu = match solve_nu(mean, cfg.nu_bounds) {
        RootOutcome::Root(nu) => nu,
        RootOutcome::AboveRange(nu) | RootOutcome::BelowRange(nu) => {
            flags.push(format!("region {r}: nu root not bracketed, clamped to {nu}"));
            nu
        }
    };

    let zeta = DVector::from_column_slice(&p.zeta);
    let delta = DVector::from_column_slice(&p.delta);

    // Psi
    let target = stats.scaled_b(&zeta, &delta);
    match &p.psi {
        CorrelationModel::Matern(spec) => {
            if d > 1 {
                let (s, ok) = matern_range_update(distances, spec, &target, n_times, cfg);
                if !ok {
                    flags.push(format!("region {r}: fine-scale range search did not converge"));
                }
                p.psi = CorrelationModel::Matern(s);
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
    let psi = p.psi.build(distances)?;
    let a = psi.inverse();

    // zeta
    let mut zeta = zeta;
    match zeta_mode {
        ZetaMode::Tied => {
            let before = region_objective(stats, tf, &zeta, &delta, &a);
            let opt = maximize_scalar(
                |x| region_objective(stats, tf, &DVector::from_element(d, x), &delta, &a),
                -BOUND,
                BOUND,
                cfg.scan_points,
                cfg.x_tol,
            );
            if opt.value >= before {
                zeta = DVector::from_element(d, opt.x);
            }
            if !opt.converged {
                flags.push(format!("region {r}: zeta search did not converge"));
            }
        }
        ZetaMode::Free => {
            let ok = coordinate_ascent(&mut zeta, |z| region_objective(stats, tf, z, &delta, &a), cfg);
            if !ok {
                flags.push(format!("region {r}: zeta coordinate search hit its sweep budget"));
            }
        }
    }

    // delta
    let mut delta_new = delta.clone();
    let ok = coordinate_ascent(&mut delta_new, |dl| region_objective(stats, tf, &zeta, dl, &a), cfg);
    if ok {
        p.delta = delta_new.iter().copied().collect();
    } else {
        flags.push(format!("region {r}: delta coordinate search hit its sweep budget, kept previous"));
    }
    p.zeta = zeta.iter().copied().collect();
    Ok(RegionUpdate { params: p, flags })
}

/// One M-step: nu, Psi, zeta, delta per region (in parallel), then Sigma.
pub fn mstep(stats: &SufficientStats, current: &SktParams, layout: &SpatialLayout, cfg: &MStepConfig) -> Result<MStepOutcome> {
    current.validate(layout)?;
    let n_t = stats.n_times;
    if n_t == 0 {
        return Err(Error::invalid("cannot run the M-step on an empty data set"));
    }
    let updates: Vec<RegionUpdate> = (0..current.n_regions())
        .into_par_iter()
        .map(|r| {
            update_region(
                r,
                &stats.regions[r],
                n_t,
                &current.regions[r],
                current.zeta_mode,
                &layout.region_distances(r),
                cfg,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut flags = Vec::new();
    let mut regions = Vec::with_capacity(updates.len());
    for u in updates {
        flags.extend(u.flags);
        regions.push(u.params);
    }
    let sigma = update_sigma(&stats.cross_sum, n_t, &current.sigma, &layout.centroid_distances(), cfg, &mut flags);
    Ok(MStepOutcome { params: SktParams { regions, sigma, zeta_mode: current.zeta_mode }, flags })
}

/// Cross-region update shared by the skew-t and Gaussian models.
pub fn update_sigma(
    cross_sum: &DMatrix<f64>,
    n_times: usize,
    current: &CorrelationModel,
    centroid_distances: &DMatrix<f64>,
    cfg: &MStepConfig,
    flags: &mut Vec<String>,
) -> CorrelationModel {
    let n = cross_sum.nrows();
    if n == 1 {
        return current.clone();
    }
    match current {
        CorrelationModel::Matern(spec) => {
            let (s, ok) = matern_range_update(centroid_distances, spec, cross_sum, n_times, cfg);
            if !ok {
                flags.push("cross-region range search did not converge".into());
            }
            CorrelationModel::Matern(s)
        }
        CorrelationModel::Free { matrix } => {
            let current_m = DMatrix::from_fn(n, n, |i, j| matrix[i][j]);
            CorrelationModel::free(&free_correlation_update(cross_sum, n_times, &current_m, cfg))
        }
    }
}

const MIN_CORRELATION_EIGENVALUE: f64 = 1e-6;

/// `-(T/2) log|C| - tr(C^{-1} S)/2`, or `-inf` when `C` is numerically
/// singular.
fn correlation_objective(m: &DMatrix<f64>, cross_sum: &DMatrix<f64>, tf: f64) -> f64 {
    if m.clone().symmetric_eigenvalues().min() < MIN_CORRELATION_EIGENVALUE {
        return f64::NEG_INFINITY;
    }
    match SpdMatrix::new(m.clone()) {
        Ok(c) => -0.5 * tf * c.log_det() - 0.5 * c.inverse().component_mul(cross_sum).sum(),
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Unit-diagonal maximizer of the cross-region objective: start from the
/// better of the current matrix and the rescaled moment estimate, then
/// coordinate ascent over the off-diagonal entries.
fn free_correlation_update(cross_sum: &DMatrix<f64>, n_times: usize, current: &DMatrix<f64>, cfg: &MStepConfig) -> DMatrix<f64> {
    let n = current.nrows();
    let tf = n_times as f64;
    let mut moment = to_correlation(&(cross_sum / tf));
    let min_eig = moment.clone().symmetric_eigenvalues().min();
    if min_eig < 2.0 * MIN_CORRELATION_EIGENVALUE {
        // blend toward the identity to get back inside the feasible set
        let floor = 2.0 * MIN_CORRELATION_EIGENVALUE;
        let eps = (floor - min_eig) / (1.0 - min_eig);
        moment = moment * (1.0 - eps) + DMatrix::identity(n, n) * eps;
    }
    let start_value = correlation_objective(current, cross_sum, tf);
    let moment_value = correlation_objective(&moment, cross_sum, tf);
    let mut m = if moment_value >= start_value { moment } else { current.clone() };
    let mut value = moment_value.max(start_value);
    for _ in 0..cfg.max_coordinate_sweeps {
        let mut change = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                let mut trial = m.clone();
                let opt = maximize_scalar(
                    |x| {
                        trial[(i, j)] = x;
                        trial[(j, i)] = x;
                        correlation_objective(&trial, cross_sum, tf)
                    },
                    -BOUND,
                    BOUND,
                    cfg.scan_points,
                    cfg.x_tol,
                );
                if opt.value > value {
                    change = change.max((opt.x - m[(i, j)]).abs());
                    m[(i, j)] = opt.x;
                    m[(j, i)] = opt.x;
                    value = opt.value;
                }
            }
        }
        if change < cfg.coordinate_tol {
            break;
        }
    }
    m
}

/// Default starting values: delta from marginal skewness, zeta = 0.1,
/// nu = 5, Matérn ranges from distance medians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub zeta: f64,
    pub nu: f64,
    pub delta_clip: f64,
    pub smoothness: f64,
    pub zeta_mode: ZetaMode,
    /// Matérn (true) or non-parametric fine-scale matrices.
    pub parametric_psi: bool,
    /// Matérn-over-centroids (true) or free cross-region correlation.
    pub parametric_sigma: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            zeta: 0.1,
            nu: 5.0,
            delta_clip: 0.85,
            smoothness: 1.5,
            zeta_mode: ZetaMode::Tied,
            parametric_psi: true,
            parametric_sigma: false,
        }
    }
}

/// Skewness of the skew-normal with shape parameter `delta` and unit
/// scale.
pub fn sn_skewness(delta: f64) -> f64 {
    let mu = SQRT_2_OVER_PI * delta;
    0.5 * (4.0 - std::f64::consts::PI) * mu.powi(3) / (1.0 - mu * mu).powf(1.5)
}

/// Inverse of [`sn_skewness`], with the input clipped to the attainable
/// range.
pub fn delta_from_skewness(gamma: f64) -> f64 {
    let g = gamma.clamp(-0.99, 0.99);
    let r = (2.0 * g.abs() / (4.0 - std::f64::consts::PI)).cbrt();
    let mu = r / (1.0 + r * r).sqrt();
    (mu / SQRT_2_OVER_PI).copysign(g)
}

pub fn sample_skewness(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 3 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    if m2 <= 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

pub fn initial_params(data: &Dataset, cfg: &InitConfig) -> Result<SktParams> {
    let layout = data.layout();
    let a = (1.0 - cfg.zeta * cfg.zeta).sqrt();
    let mut regions = Vec::with_capacity(layout.n_regions());
    for r in 0..layout.n_regions() {
        let range = layout.region_range(r);
        let delta: Vec<f64> = range
            .clone()
            .map(|s| {
                let col: Vec<f64> = data.values().column(s).iter().copied().collect();
                (delta_from_skewness(sample_skewness(&col)) / a).clamp(-cfg.delta_clip, cfg.delta_clip)
            })
            .collect();
        let dist = layout.region_distances(r);
        let med = median_offdiagonal(&dist);
        let spec = MaternSpec::new(if med > 0.0 { 0.5 * med } else { 100.0 }, cfg.smoothness)?;
        let psi = if cfg.parametric_psi {
            CorrelationModel::Matern(spec)
        } else {
            CorrelationModel::free(&matern_from_distances(&dist, &spec))
        };
        regions.push(RegionParams { delta, zeta: vec![cfg.zeta; range.len()], nu: cfg.nu, psi });
    }
    let n = layout.n_regions();
    let sigma = if cfg.parametric_sigma {
        let med = median_offdiagonal(&layout.centroid_distances());
        CorrelationModel::matern(if med > 0.0 { med } else { 100.0 }, cfg.smoothness)?
    } else {
        CorrelationModel::free(&DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.5 }))
    };
    let p = SktParams { regions, sigma, zeta_mode: cfg.zeta_mode };
    p.validate(layout)?;
    Ok(p)
}

/// EM loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub gibbs: GibbsConfig,
    pub mstep: MStepConfig,
    /// Aitken tolerance on the log-likelihood scale.
    pub tol: f64,
    pub max_iterations: usize,
    /// Prior draws per time point of the likelihood estimator.
    pub loglik_draws: usize,
    /// Consecutive significant likelihood decreases that abort the fit.
    pub abort_after: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            gibbs: GibbsConfig::default(),
            mstep: MStepConfig::default(),
            tol: 1e-3,
            max_iterations: 200,
            loglik_draws: 2000,
            abort_after: 5,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.gibbs.validate()?;
        if !(self.tol > 0.0) {
            return Err(Error::invalid("Aitken tolerance must be positive"));
        }
        if self.loglik_draws == 0 {
            return Err(Error::invalid("the likelihood estimator needs at least one draw"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxIterations,
    Aborted,
}

/// One EM iteration as recorded in the trace. Iteration 0 holds the
/// starting values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub iteration: usize,
    pub params: SktParams,
    pub q_value: Option<f64>,
    pub loglik: f64,
    pub loglik_se: f64,
    pub sweeps: usize,
    pub acceptance: Vec<f64>,
    pub aitken_limit: Option<f64>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub iterations: Vec<EmIteration>,
}

impl EmTrace {
    pub const CSV_HEADER: &'static str = "iteration,sweeps,q_value,loglik,loglik_se,aitken_limit,acceptance";

    pub fn csv_line(it: &EmIteration) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        let acc: Vec<String> = it.acceptance.iter().map(|a| format!("{a:.6}")).collect();
        format!(
            "{},{},{},{:.16e},{:.16e},{},{}",
            it.iteration,
            it.sweeps,
            opt(it.q_value),
            it.loglik,
            it.loglik_se,
            opt(it.aitken_limit),
            acc.join(";")
        )
    }
}

/// Aitken-projected limit from three consecutive values; `None` when the
/// rate estimate is not a contraction.
pub fn aitken_limit(l0: f64, l1: f64, l2: f64) -> Option<f64> {
    let den = l1 - l0;
    if den == 0.0 {
        return if l2 == l1 { Some(l2) } else { None };
    }
    let a = (l2 - l1) / den;
    if !(a < 1.0) || !a.is_finite() {
        return None;
    }
    let lim = l1 + (l2 - l1) / (1.0 - a);
    lim.is_finite().then_some(lim)
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: SktParams,
    pub status: FitStatus,
    pub loglik: LikelihoodEstimate,
    pub trace: EmTrace,
}

/// Shared EM driver: stopping and abort rules on a likelihood sequence.
pub(crate) struct Monitor {
    tol: f64,
    abort_after: usize,
    decreases: usize,
    history: Vec<(f64, f64)>,
}

pub(crate) enum MonitorStep {
    Continue(Option<f64>),
    Converged(Option<f64>),
    Abort,
}

impl Monitor {
    pub(crate) fn new(tol: f64, abort_after: usize) -> Self {
        Self { tol, abort_after, decreases: 0, history: Vec::new() }
    }

    pub(crate) fn push(&mut self, loglik: f64, se: f64) -> MonitorStep {
        if let Some(&(prev, prev_se)) = self.history.last() {
            // relative floor so rounding noise of exact likelihoods is not counted
            if loglik < prev - 2.0 * se.max(prev_se) - 1e-10 * prev.abs() {
                self.decreases += 1;
            } else {
                self.decreases = 0;
            }
        }
        self.history.push((loglik, se));
        if self.abort_after > 0 && self.decreases >= self.abort_after {
            return MonitorStep::Abort;
        }
        let n = self.history.len();
        if n < 3 {
            return MonitorStep::Continue(None);
        }
        let lim = aitken_limit(self.history[n - 3].0, self.history[n - 2].0, self.history[n - 1].0);
        match lim {
            Some(l) if (l - loglik).abs() < self.tol => MonitorStep::Converged(lim),
            _ => MonitorStep::Continue(lim),
        }
    }
}

/// Fit the skew-t model by Monte Carlo EM. `on_iteration` sees every trace
/// entry as soon as it is produced.
pub fn fit(
    data: &Dataset,
    init: &SktParams,
    cfg: &FitConfig,
    mut on_iteration: Option<&mut dyn FnMut(&EmIteration)>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let layout = data.layout();
    let lik_seed = rng::derive_seed(cfg.gibbs.seed, "loglik", 0);
    let mut params = init.clone();
    let mut model = params.compile(layout)?;
    let mut lik = skt_marginal_loglik(data, &model, cfg.loglik_draws, lik_seed)?;
    let mut monitor = Monitor::new(cfg.tol, cfg.abort_after);
    monitor.push(lik.value, lik.stderr);
    let mut trace = EmTrace::default();
    let first = EmIteration {
        iteration: 0,
        params: params.clone(),
        q_value: None,
        loglik: lik.value,
        loglik_se: lik.stderr,
        sweeps: 0,
        acceptance: Vec::new(),
        aitken_limit: None,
        flags: Vec::new(),
    };
    if let Some(cb) = on_iteration.as_mut() {
        cb(&first);
    }
    trace.iterations.push(first);

    let mut status = FitStatus::MaxIterations;
    for k in 0..cfg.max_iterations {
        let sweeps = cfg.gibbs.chain_length(k);
        let moments = gibbs_estep(data, &model, sweeps, cfg.gibbs.burn_in(sweeps), cfg.gibbs.seed, k as u64)?;
        let stats = SufficientStats::from_moments(data, &moments)?;
        let out = mstep(&stats, &params, layout, &cfg.mstep)?;
        let mut flags = out.flags;
        for (r, &a) in moments.acceptance.iter().enumerate() {
            if !(0.1..0.99).contains(&a) {
                flags.push(format!("region {r}: MH acceptance rate {a:.3} outside (0.1, 0.99)"));
            }
        }
        log::debug!("EM iteration {}: M = {sweeps}, acceptance {:?}", k + 1, moments.acceptance);
        params = out.params;
        model = params.compile(layout)?;
        let q = q_value(&stats, &model);
        lik = skt_marginal_loglik(data, &model, cfg.loglik_draws, lik_seed)?;
        let step = monitor.push(lik.value, lik.stderr);
        let limit = match step {
            MonitorStep::Continue(l) | MonitorStep::Converged(l) => l,
            MonitorStep::Abort => None,
        };
        let it = EmIteration {
            iteration: k + 1,
            params: params.clone(),
            q_value: Some(q),
            loglik: lik.value,
            loglik_se: lik.stderr,
            sweeps,
            acceptance: moments.acceptance.clone(),
            aitken_limit: limit,
            flags,
        };
        log::info!("iteration {}: loglik {:.4} (se {:.4})", k + 1, lik.value, lik.stderr);
        if let Some(cb) = on_iteration.as_mut() {
            cb(&it);
        }
        trace.iterations.push(it);
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
    Ok(FitOutcome { params, status, loglik: lik, trace })
}
