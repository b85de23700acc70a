//! Independent reference computations shared by the integration and
//! acceptance tests. Nothing here calls the library's likelihood, sampler
//! or update code; only plain nalgebra/statrs arithmetic.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use skt_spatial::gaussian::{GauModel, GauRegionStats, GauStats};
use skt_spatial::mcem::{RegionStats, SufficientStats};
use skt_spatial::model::{CompiledModel, CorrelationModel, RegionParams, SktParams, ZetaMode};
use skt_spatial::skew::{convolve_sn_normal, st_log_density, ConvolutionInput, SnParams};
use skt_spatial::{Site, SpatialLayout, SpdMatrix};
use statrs::function::gamma::{digamma, ln_gamma};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- KS tools

/// One-sample Kolmogorov-Smirnov distance given the model CDF at the
/// sorted sample.
pub fn ks_from_cdf(cdf_at_sorted: &[f64]) -> f64 {
    let n = cdf_at_sorted.len() as f64;
    cdf_at_sorted
        .iter()
        .enumerate()
        .map(|(i, &f)| (f - i as f64 / n).max((i + 1) as f64 / n - f))
        .fold(0.0, f64::max)
}

pub fn ks_one_sample<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let f: Vec<f64> = s.iter().map(|&x| cdf(x)).collect();
    ks_from_cdf(&f)
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic p-value of the two-sample statistic.
pub fn ks_p_value(d: f64, n: usize, m: usize) -> f64 {
    let ne = (n * m) as f64 / (n + m) as f64;
    let s = ne.sqrt();
    let lambda = (s + 0.12 + 0.11 / s) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

// ------------------------------------------------------- grid densities

/// Composite Simpson weights on `n` (odd) equally spaced points.
pub fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    assert!(n >= 3 && n % 2 == 1);
    (0..n)
        .map(|i| {
            let c = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect()
}

/// A univariate density tabulated on a fine grid from an unnormalized log
/// density, normalized numerically.
pub struct GridDensity {
    pub x: Vec<f64>,
    pub pdf: Vec<f64>,
    pub cdf: Vec<f64>,
}

impl GridDensity {
    pub fn new<F: Fn(f64) -> f64>(log_density: F, lo: f64, hi: f64, n: usize) -> Self {
        let n = if n % 2 == 0 { n + 1 } else { n };
        let h = (hi - lo) / (n - 1) as f64;
        let x: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
        let lv: Vec<f64> = x.iter().map(|&v| log_density(v)).collect();
        let top = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = lv.iter().map(|&l| (l - top).exp()).collect();
        let w = simpson_weights(n, h);
        let total: f64 = raw.iter().zip(&w).map(|(a, b)| a * b).sum();
        let pdf: Vec<f64> = raw.iter().map(|v| v / total).collect();
        // trapezoid cumulative, renormalized to end at 1
        let mut cdf = vec![0.0; n];
        for i in 1..n {
            cdf[i] = cdf[i - 1] + 0.5 * h * (pdf[i - 1] + pdf[i]);
        }
        let end = cdf[n - 1];
        cdf.iter_mut().for_each(|c| *c /= end);
        Self { x, pdf, cdf }
    }

    pub fn cdf_at(&self, v: f64) -> f64 {
        let n = self.x.len();
        if v <= self.x[0] {
            return 0.0;
        }
        if v >= self.x[n - 1] {
            return 1.0;
        }
        let h = self.x[1] - self.x[0];
        let k = (((v - self.x[0]) / h) as usize).min(n - 2);
        let t = (v - self.x[k]) / h;
        // integrate the linear interpolant of the pdf from x_k to v
        let p0 = self.pdf[k];
        let p1 = self.pdf[k + 1];
        let partial = h * (p0 * t + 0.5 * (p1 - p0) * t * t);
        let scale = self.cdf[k + 1] - self.cdf[k];
        let full = 0.5 * h * (p0 + p1);
        let frac = if full > 0.0 { partial / full } else { t };
        self.cdf[k] + scale * frac
    }

    pub fn ks(&self, samples: &[f64]) -> f64 {
        ks_one_sample(samples, |v| self.cdf_at(v))
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn ln_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mean) * (x - mean) / var)
}

pub fn ln_gamma_pdf(z: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * z.ln() - rate * z
}

// ------------------------------------------------------------- layouts

/// Regions laid out as short east-west rows, `sizes[r]` sites each, the
/// regions stacked 3 degrees apart.
pub fn row_layout(sizes: &[usize]) -> SpatialLayout {
    let mut sites = Vec::new();
    for (r, &n) in sizes.iter().enumerate() {
        for j in 0..n {
            sites.push(Site {
                id: format!("s{r}_{j}"),
                lon: 3.0 * r as f64 + 0.6 * j as f64,
                lat: 20.0 + 0.3 * (j % 2) as f64,
                region: r,
            });
        }
    }
    SpatialLayout::new(sites).unwrap()
}

pub fn corr2(rho: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0])
}

/// Random correlation matrix from normalized random factors.
pub fn random_correlation<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let k = n + 2;
    let f: DMatrix<f64> = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(rng));
    let m = &f * f.transpose() + DMatrix::identity(n, n) * 0.5;
    let w = DVector::from_fn(n, |i, _| m[(i, i)].sqrt());
    DMatrix::from_fn(n, n, |i, j| m[(i, j)] / (w[i] * w[j]))
}

// ------------------------------------------------------- the tiny case

/// Two regions with one site each and unit fine-scale variance.
#[derive(Debug, Clone, Copy)]
pub struct TinyCase {
    pub zeta: [f64; 2],
    pub delta: [f64; 2],
    pub nu: [f64; 2],
    pub rho: f64,
}

impl TinyCase {
    pub fn layout(&self) -> SpatialLayout {
        row_layout(&[1, 1])
    }

    pub fn params(&self) -> SktParams {
        let regions = (0..2)
            .map(|r| RegionParams {
                delta: vec![self.delta[r]],
                zeta: vec![self.zeta[r]],
                nu: self.nu[r],
                psi: CorrelationModel::free(&DMatrix::identity(1, 1)),
            })
            .collect();
        SktParams { regions, sigma: CorrelationModel::free(&corr2(self.rho)), zeta_mode: ZetaMode::Tied }
    }

    pub fn model(&self) -> CompiledModel {
        self.params().compile(&self.layout()).unwrap()
    }

    fn c(&self, r: usize) -> f64 {
        (1.0 - self.zeta[r] * self.zeta[r]).sqrt() * self.delta[r]
    }

    fn scale2(&self, r: usize) -> f64 {
        (1.0 - self.zeta[r] * self.zeta[r]) * (1.0 - self.delta[r] * self.delta[r])
    }

    /// Joint log density of `(y, eta0, eta1, Z)` assembled from the
    /// hierarchical description: Gamma mixing, half-normal `eta1` with
    /// variance `1/Z`, `eta0 ~ N(0, D Sigma D)` with `D = diag(Z^-1/2)`,
    /// and `y_r ~ N(zeta eta0 + c eta1, scale^2 / Z)`.
    pub fn joint(&self, y: [f64; 2], eta0: [f64; 2], eta1: [f64; 2], z: [f64; 2]) -> f64 {
        let mut total = 0.0;
        for r in 0..2 {
            total += ln_gamma_pdf(z[r], 0.5 * self.nu[r], 0.5 * self.nu[r]);
            total += 2f64.ln() + ln_normal_pdf(eta1[r], 0.0, 1.0 / z[r]);
            let mean = self.zeta[r] * eta0[r] + self.c(r) * eta1[r];
            total += ln_normal_pdf(y[r], mean, self.scale2(r) / z[r]);
        }
        let v = DMatrix::from_fn(2, 2, |i, j| {
            let s = if i == j { 1.0 } else { self.rho };
            s / (z[i] * z[j]).sqrt()
        });
        let det = v.determinant();
        let inv = v.try_inverse().unwrap();
        let e = DVector::from_column_slice(&eta0);
        total += -LN_2PI - 0.5 * det.ln() - 0.5 * (e.transpose() * inv * &e)[(0, 0)];
        total
    }

    /// Posterior moments of the latents given one observation, by Simpson
    /// integration over `(log Z_1, log Z_2, sqrt(Z_1) eta1_1, sqrt(Z_2) eta1_2)`
    /// with `eta0` integrated in closed form.
    pub fn posterior(&self, y: [f64; 2], grid: &TinyGrid) -> TinyMoments {
        let ns = grid.s_points;
        let nu_pts = grid.u_points;
        let hs = (grid.s_hi - grid.s_lo) / (ns - 1) as f64;
        let hu = grid.u_hi / (nu_pts - 1) as f64;
        let ws = simpson_weights(ns, hs);
        let wu = simpson_weights(nu_pts, hu);
        let sv: Vec<f64> = (0..ns).map(|i| grid.s_lo + hs * i as f64).collect();
        let uv: Vec<f64> = (0..nu_pts).map(|i| hu * i as f64).collect();
        // log prior of s = log Z (Gamma density times Jacobian Z)
        let lps: [Vec<f64>; 2] = std::array::from_fn(|r| {
            sv.iter().map(|&s| ln_gamma_pdf(s.exp(), 0.5 * self.nu[r], 0.5 * self.nu[r]) + s).collect()
        });
        let lpu: Vec<f64> = uv.iter().map(|&u| 2f64.ln() + ln_normal_pdf(u, 0.0, 1.0)).collect();
        let c = [self.c(0), self.c(1)];
        let sc2 = [self.scale2(0), self.scale2(1)];

        let mut acc = TinyMoments::default();
        let mut mass = 0.0f64;
        // A reference log-weight keeps exponentials in range.
        let reference = {
            let z = [1.0, 1.0];
            let cov = self.y_cov(z, sc2);
            gaussian2_ln(&[y[0], y[1]], &[0.0, 0.0], &cov) + lps[0][ns / 2] + lps[1][ns / 2] + 2.0 * lpu[0]
        };
        for (i1, &s1) in sv.iter().enumerate() {
            for (i2, &s2) in sv.iter().enumerate() {
                let z = [s1.exp(), s2.exp()];
                let sz = [z[0].sqrt(), z[1].sqrt()];
                let cov = self.y_cov(z, sc2);
                let (cinv, cdet) = inv2(&cov);
                let lnorm = -LN_2PI - 0.5 * cdet.ln();
                // eta0 | Z, eta1, y: precision P = V^-1 + diag(zeta^2 Z / scale^2)
                let vinv = {
                    let v = [[1.0 / z[0], self.rho / (sz[0] * sz[1])], [self.rho / (sz[0] * sz[1]), 1.0 / z[1]]];
                    inv2(&v).0
                };
                let p = [
                    [vinv[0][0] + self.zeta[0] * self.zeta[0] * z[0] / sc2[0], vinv[0][1]],
                    [vinv[1][0], vinv[1][1] + self.zeta[1] * self.zeta[1] * z[1] / sc2[1]],
                ];
                let (pinv, _) = inv2(&p);
                let g = [self.zeta[0] * z[0] / sc2[0], self.zeta[1] * z[1] / sc2[1]];
                let base = lps[0][i1] + lps[1][i2] + lnorm - reference;
                let wss = ws[i1] * ws[i2];
                for (j1, &u1) in uv.iter().enumerate() {
                    let e1a = u1 / sz[0];
                    let r0 = y[0] - c[0] * e1a;
                    for (j2, &u2) in uv.iter().enumerate() {
                        let e1b = u2 / sz[1];
                        let r1 = y[1] - c[1] * e1b;
                        let q = cinv[0][0] * r0 * r0 + 2.0 * cinv[0][1] * r0 * r1 + cinv[1][1] * r1 * r1;
                        let lw = base + lpu[j1] + lpu[j2] - 0.5 * q;
                        let w = wss * wu[j1] * wu[j2] * lw.exp();
                        if w == 0.0 {
                            continue;
                        }
                        let b = [g[0] * r0, g[1] * r1];
                        let mu = [pinv[0][0] * b[0] + pinv[0][1] * b[1], pinv[1][0] * b[0] + pinv[1][1] * b[1]];
                        let e1 = [e1a, e1b];
                        let u = [u1, u2];
                        mass += w;
                        for r in 0..2 {
                            acc.z[r] += w * z[r];
                            acc.log_z[r] += w * [s1, s2][r];
                            acc.z_eta0[r] += w * z[r] * mu[r];
                            acc.z_eta1[r] += w * sz[r] * u[r];
                            acc.z_eta0_sq[r] += w * z[r] * (mu[r] * mu[r] + pinv[r][r]);
                            acc.z_eta1_sq[r] += w * u[r] * u[r];
                            acc.z_eta0_eta1[r] += w * z[r] * mu[r] * e1[r];
                        }
                        for a in 0..2 {
                            for bb in 0..2 {
                                acc.cross[a][bb] += w * sz[a] * sz[bb] * (mu[a] * mu[bb] + pinv[a][bb]);
                            }
                        }
                    }
                }
            }
        }
        acc.scale(1.0 / mass);
        acc.log_marginal = mass.ln() + reference;
        acc
    }

    /// Marginal density of one observation.
    pub fn log_marginal(&self, y: [f64; 2], grid: &TinyGrid) -> f64 {
        self.posterior(y, grid).log_marginal
    }

    fn y_cov(&self, z: [f64; 2], sc2: [f64; 2]) -> [[f64; 2]; 2] {
        let off = self.zeta[0] * self.zeta[1] * self.rho / (z[0] * z[1]).sqrt();
        [
            [(self.zeta[0] * self.zeta[0] + sc2[0]) / z[0], off],
            [off, (self.zeta[1] * self.zeta[1] + sc2[1]) / z[1]],
        ]
    }
}

fn inv2(m: &[[f64; 2]; 2]) -> ([[f64; 2]; 2], f64) {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    ([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]], det)
}

fn gaussian2_ln(y: &[f64; 2], mean: &[f64; 2], cov: &[[f64; 2]; 2]) -> f64 {
    let (inv, det) = inv2(cov);
    let r = [y[0] - mean[0], y[1] - mean[1]];
    let q = inv[0][0] * r[0] * r[0] + 2.0 * inv[0][1] * r[0] * r[1] + inv[1][1] * r[1] * r[1];
    -LN_2PI - 0.5 * det.ln() - 0.5 * q
}

#[derive(Debug, Clone, Copy)]
pub struct TinyGrid {
    pub s_lo: f64,
    pub s_hi: f64,
    pub s_points: usize,
    pub u_hi: f64,
    pub u_points: usize,
}

impl TinyGrid {
    pub fn fine() -> Self {
        Self { s_lo: -9.0, s_hi: 4.0, s_points: 131, u_hi: 8.0, u_points: 81 }
    }

    pub fn coarse() -> Self {
        Self { s_lo: -9.0, s_hi: 4.0, s_points: 53, u_hi: 8.0, u_points: 33 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TinyMoments {
    pub z: [f64; 2],
    pub log_z: [f64; 2],
    pub z_eta0: [f64; 2],
    pub z_eta1: [f64; 2],
    pub z_eta0_sq: [f64; 2],
    pub z_eta1_sq: [f64; 2],
    pub z_eta0_eta1: [f64; 2],
    pub cross: [[f64; 2]; 2],
    pub log_marginal: f64,
}

impl TinyMoments {
    fn scale(&mut self, k: f64) {
        for v in [
            &mut self.z,
            &mut self.log_z,
            &mut self.z_eta0,
            &mut self.z_eta1,
            &mut self.z_eta0_sq,
            &mut self.z_eta1_sq,
            &mut self.z_eta0_eta1,
        ] {
            v.iter_mut().for_each(|x| *x *= k);
        }
        self.cross.iter_mut().flatten().for_each(|x| *x *= k);
    }

    /// `(name, value)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        let fields: [(&str, &[f64; 2]); 7] = [
            ("Z", &self.z),
            ("logZ", &self.log_z),
            ("Z*eta0", &self.z_eta0),
            ("Z*eta1", &self.z_eta1),
            ("Z*eta0^2", &self.z_eta0_sq),
            ("Z*eta1^2", &self.z_eta1_sq),
            ("Z*eta0*eta1", &self.z_eta0_eta1),
        ];
        for (name, v) in fields {
            for r in 0..2 {
                out.push((format!("{name}[{r}]"), v[r]));
            }
        }
        out.push(("cross[0,0]".into(), self.cross[0][0]));
        out.push(("cross[0,1]".into(), self.cross[0][1]));
        out.push(("cross[1,1]".into(), self.cross[1][1]));
        out
    }
}

/// Relative error, except for `<log Z>`, which sits near zero and is compared
/// through the geometric mean `exp<log Z>`.
pub fn moment_error(name: &str, got: f64, expect: f64) -> f64 {
    if name.starts_with("logZ") {
        ((got - expect).exp() - 1.0).abs()
    } else {
        ((got - expect) / expect).abs()
    }
}

// ----------------------------------------------- scalar marginal oracle

/// `log p(y)` for one region with one site, by Simpson integration over
/// `(log Z, sqrt(Z) eta1)` with `eta0` integrated in closed form.
pub fn scalar_log_marginal(y: f64, zeta: f64, delta: f64, nu: f64) -> f64 {
    let (ns, nu_pts) = (261, 161);
    let (s_lo, s_hi, u_hi) = (-12.0, 5.0, 9.0);
    let hs = (s_hi - s_lo) / (ns - 1) as f64;
    let hu = u_hi / (nu_pts - 1) as f64;
    let ws = simpson_weights(ns, hs);
    let wu = simpson_weights(nu_pts, hu);
    let c = (1.0 - zeta * zeta).sqrt() * delta;
    let total_var = zeta * zeta + (1.0 - zeta * zeta) * (1.0 - delta * delta);
    let mut sum = 0.0;
    for i in 0..ns {
        let s = s_lo + hs * i as f64;
        let z = s.exp();
        let lp = ln_gamma_pdf(z, 0.5 * nu, 0.5 * nu) + s;
        for j in 0..nu_pts {
            let u = hu * j as f64;
            let l = lp + 2f64.ln() + ln_normal_pdf(u, 0.0, 1.0) + ln_normal_pdf(y, c * u / z.sqrt(), total_var / z);
            sum += ws[i] * wu[j] * l.exp();
        }
    }
    sum.ln()
}

// ------------------------------------------------- exact moment builders

/// Population sufficient statistics at the true parameters: for each of
/// `n_times` draws the latent moments equal their prior expectations.
pub fn exact_skt_stats(model: &CompiledModel, n_times: usize) -> SufficientStats {
    let tf = n_times as f64;
    let regions = model
        .regions
        .iter()
        .map(|m| {
            let g = &m.zeta * m.zeta.transpose() + &m.c * m.c.transpose() + m.upsilon.matrix();
            RegionStats {
                s_yy: g * tf,
                s_y0: &m.zeta * tf,
                s_y1: &m.c * tf,
                s00: tf,
                s01: 0.0,
                s11: tf,
                sum_z: tf,
                sum_log_z: tf * (digamma(0.5 * m.nu) - (0.5 * m.nu).ln()),
            }
        })
        .collect();
    SufficientStats { n_times, regions, cross_sum: model.sigma.matrix() * tf }
}

pub fn exact_gau_stats(model: &GauModel, n_times: usize) -> GauStats {
    let tf = n_times as f64;
    let regions = model
        .zeta
        .iter()
        .zip(&model.psi)
        .map(|(&z, psi)| {
            let d = psi.dim();
            let ones = DMatrix::from_element(d, d, 1.0);
            GauRegionStats {
                s_yy: (ones * (z * z) + psi.matrix() * (1.0 - z * z)) * tf,
                s_xy: DVector::from_element(d, z * tf),
                s_xx: tf,
            }
        })
        .collect();
    GauStats { n_times, regions, cross_sum: model.sigma.matrix() * tf }
}

// ------------------------------------------------ convolution closure

/// One randomized configuration of the convolution `(zeta X0 + Delta X)/sqrt(Z)`.
#[derive(Debug, Clone)]
pub struct ConvolutionCase {
    pub zeta: DVector<f64>,
    pub omega: DMatrix<f64>,
    pub alpha: DVector<f64>,
    pub nu: f64,
}

impl ConvolutionCase {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let d = rng.random_range(1..=3usize);
        let zeta = DVector::from_fn(d, |_, _| rng.random_range(-0.7..0.7));
        let corr = random_correlation(d, rng);
        let w = DVector::from_fn(d, |_, _| rng.random_range(0.6..1.8));
        let omega = DMatrix::from_fn(d, d, |i, j| w[i] * corr[(i, j)] * w[j]);
        let alpha = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
        let nu = rng.random_range(2.0..12.0);
        Self { zeta, omega, alpha, nu }
    }

    /// Matérn pair used as the fixed bivariate example.
    pub fn matern_pair() -> Self {
        let r = 2f64 * (-1.0f64).exp();
        Self {
            zeta: DVector::from_column_slice(&[0.3, 0.3]),
            omega: corr2(r),
            alpha: DVector::from_column_slice(&[2.0, 2.0]),
            nu: 3.0,
        }
    }
}

pub struct ConvolutionCheck {
    pub max_ks: f64,
    pub max_corr_error: f64,
}

/// Simulate `n` draws directly and compare with the analytic skew-t law.
pub fn check_convolution(case: &ConvolutionCase, n: usize, seed: u64) -> ConvolutionCheck {
    let d = case.zeta.len();
    let omega = SpdMatrix::new(case.omega.clone()).unwrap();
    let st = convolve_sn_normal(&ConvolutionInput {
        zeta: case.zeta.clone(),
        omega: omega.clone(),
        alpha: case.alpha.clone(),
        nu: case.nu,
    })
    .unwrap();
    let (sn, w) = SnParams::from_scale_matrix(&omega, &case.alpha).unwrap();
    let mut rng = rng(seed);
    let x = sn.sample(n, &mut rng);
    let gamma = Gamma::new(0.5 * case.nu, 2.0 / case.nu).unwrap();
    let scale = case.zeta.map(|z| (1.0 - z * z).sqrt());
    let mut y = DMatrix::zeros(n, d);
    let mut second = DMatrix::zeros(d, d);
    for i in 0..n {
        let x0: f64 = StandardNormal.sample(&mut rng);
        let z: f64 = gamma.sample(&mut rng);
        let num = DVector::from_fn(d, |j, _| case.zeta[j] * x0 + scale[j] * w[j] * x[(i, j)]);
        second += &num * num.transpose();
        for j in 0..d {
            y[(i, j)] = num[j] / z.sqrt();
        }
    }
    second /= n as f64;
    let mut max_ks = 0.0f64;
    for j in 0..d {
        let marg = st.marginal(j).unwrap();
        let mut col: Vec<f64> = y.column(j).iter().copied().collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let density = |v: f64| st_log_density(&DVector::from_element(1, v), &marg).unwrap().exp();
        let cdf = skt_spatial::quadrature::cdf_at_sorted(density, &col);
        max_ks = max_ks.max(ks_from_cdf(&cdf));
    }
    let star = st.omega().matrix();
    let mut max_corr_error = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let emp = second[(i, j)] / (second[(i, i)] * second[(j, j)]).sqrt();
            let th = star[(i, j)] / (star[(i, i)] * star[(j, j)]).sqrt();
            max_corr_error = max_corr_error.max((emp - th).abs());
        }
    }
    ConvolutionCheck { max_ks, max_corr_error }
}

// ------------------------------------------------------------ moments

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn central_moment(x: &[f64], k: i32) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(k)).sum::<f64>() / x.len() as f64
}

pub fn skewness(x: &[f64]) -> f64 {
    central_moment(x, 3) / central_moment(x, 2).powf(1.5)
}

pub fn excess_kurtosis(x: &[f64]) -> f64 {
    central_moment(x, 4) / central_moment(x, 2).powi(2) - 3.0
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

pub fn sample_covariance(cols: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cols.nrows() as f64;
    let means = DVector::from_fn(cols.ncols(), |j, _| cols.column(j).sum() / n);
    let mut c = DMatrix::zeros(cols.ncols(), cols.ncols());
    for row in cols.row_iter() {
        let v = row.transpose() - &means;
        c += &v * v.transpose();
    }
    c / (n - 1.0)
}

pub fn frobenius_relative(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

// --------------------------------------------------- parameter changes

fn correlation_change(a: &CorrelationModel, b: &CorrelationModel) -> f64 {
    match (a, b) {
        (CorrelationModel::Matern(x), CorrelationModel::Matern(y)) => {
            ((x.range_km - y.range_km) / y.range_km).abs().max((x.smoothness - y.smoothness).abs())
        }
        (CorrelationModel::Free { matrix: x }, CorrelationModel::Free { matrix: y }) => x
            .iter()
            .flatten()
            .zip(y.iter().flatten())
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max),
        _ => f64::INFINITY,
    }
}

/// Largest change between two parameter sets: absolute for zeta, delta and
/// matrix entries, relative for nu and Matérn ranges. Returns the name of
/// the parameter that moved most.
pub fn skt_param_change(a: &SktParams, b: &SktParams) -> (f64, String) {
    let mut worst = (0.0f64, String::new());
    let mut note = |v: f64, name: String| {
        if v > worst.0 || v.is_nan() {
            worst = (v, name);
        }
    };
    for (r, (x, y)) in a.regions.iter().zip(&b.regions).enumerate() {
        note(((x.nu - y.nu) / y.nu).abs(), format!("nu[{r}]"));
        for (i, (u, v)) in x.zeta.iter().zip(&y.zeta).enumerate() {
            note((u - v).abs(), format!("zeta[{r}][{i}]"));
        }
        for (i, (u, v)) in x.delta.iter().zip(&y.delta).enumerate() {
            note((u - v).abs(), format!("delta[{r}][{i}]"));
        }
        note(correlation_change(&x.psi, &y.psi), format!("psi[{r}]"));
    }
    note(correlation_change(&a.sigma, &b.sigma), "sigma".into());
    worst
}

pub fn gau_param_change(a: &skt_spatial::gaussian::GauParams, b: &skt_spatial::gaussian::GauParams) -> (f64, String) {
    let mut worst = (0.0f64, String::new());
    for (r, (x, y)) in a.regions.iter().zip(&b.regions).enumerate() {
        for (v, name) in [((x.zeta - y.zeta).abs(), format!("zeta[{r}]")), (correlation_change(&x.psi, &y.psi), format!("psi[{r}]"))] {
            if v > worst.0 || v.is_nan() {
                worst = (v, name);
            }
        }
    }
    let v = correlation_change(&a.sigma, &b.sigma);
    if v > worst.0 || v.is_nan() {
        worst = (v, "sigma".into());
    }
    worst
}
