//! Multivariate skew-normal and skew-t densities, samplers, and the closure
//! of the skew-t family under the large-scale convolution.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::SpdMatrix;
use crate::special::{ln_gamma, ln_normal_cdf, ln_student_t_cdf};

const LN_2: f64 = std::f64::consts::LN_2;

/// `lambda(zeta) = zeta / sqrt(1 - zeta^2)`.
pub fn lambda(zeta: f64) -> f64 {
    zeta / (1.0 - zeta * zeta).sqrt()
}

fn check_unit_diagonal(m: &SpdMatrix) -> Result<()> {
    for i in 0..m.dim() {
        if (m.matrix()[(i, i)] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParams(format!(
                "correlation matrix has diagonal entry {} at {i}",
                m.matrix()[(i, i)]
            )));
        }
    }
    Ok(())
}

/// Standard skew-normal `2 phi_d(y; Omega_bar) Phi(alpha^T y)`.
#[derive(Debug, Clone)]
pub struct SnParams {
    omega_bar: SpdMatrix,
    alpha: DVector<f64>,
}

impl SnParams {
    pub fn new(omega_bar: SpdMatrix, alpha: DVector<f64>) -> Result<Self> {
        if alpha.len() != omega_bar.dim() {
            return Err(Error::DimensionMismatch { expected: omega_bar.dim(), got: alpha.len() });
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidParams("skewness vector is not finite".into()));
        }
        check_unit_diagonal(&omega_bar)?;
        Ok(Self { omega_bar, alpha })
    }

    /// Standardize `2 phi_d(x; Omega) Phi(alpha^T x)` for a general scale
    /// matrix. Returns the standard parameters and the scales `omega` such
    /// that `X = omega * X_bar`.
    pub fn from_scale_matrix(omega: &SpdMatrix, alpha: &DVector<f64>) -> Result<(Self, DVector<f64>)> {
        let d = omega.dim();
        let w = DVector::from_fn(d, |i, _| omega.matrix()[(i, i)].sqrt());
        let bar = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                1.0
            } else {
                omega.matrix()[(i, j)] / (w[i] * w[j])
            }
        });
        let a = alpha.component_mul(&w);
        Ok((Self::new(SpdMatrix::new(bar)?, a)?, w))
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn omega_bar(&self) -> &SpdMatrix {
        &self.omega_bar
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// `delta = Omega_bar alpha / sqrt(1 + alpha^T Omega_bar alpha)`.
    pub fn delta(&self) -> DVector<f64> {
        let oa = self.omega_bar.matrix() * &self.alpha;
        let q = self.alpha.dot(&oa);
        oa / (1.0 + q).sqrt()
    }

    /// Draw `n` samples as rows via `X = delta |U0| + Delta_delta U`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        let sampler = SnSampler::new(self);
        let mut out = DMatrix::zeros(n, self.dim());
        for i in 0..n {
            let x = sampler.draw(rng);
            out.set_row(i, &x.transpose());
        }
        out
    }
}

/// Precomputed skew-normal stochastic representation.
#[derive(Debug, Clone)]
struct SnSampler {
    delta: DVector<f64>,
    scale: DVector<f64>,
    psi_lower: DMatrix<f64>,
}

impl SnSampler {
    fn new(p: &SnParams) -> Self {
        let d = p.dim();
        let delta = p.delta();
        let scale = delta.map(|x| (1.0 - x * x).sqrt());
        let psi = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                1.0
            } else {
                (p.omega_bar.matrix()[(i, j)] - delta[i] * delta[j]) / (scale[i] * scale[j])
            }
        });
        // Psi is the correlation of a valid SN representation; it is SPD
        // whenever Omega_bar is.
        let psi_lower = SpdMatrix::new(psi)
            .map(|m| m.lower())
            .unwrap_or_else(|_| DMatrix::identity(d, d));
        Self { delta, scale, psi_lower }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.delta.len();
        let u0: f64 = StandardNormal.sample(rng);
        let e = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let u = &self.psi_lower * e;
        DVector::from_fn(d, |i, _| self.delta[i] * u0.abs() + self.scale[i] * u[i])
    }
}

pub fn sn_log_density(y: &DVector<f64>, p: &SnParams) -> Result<f64> {
    if y.len() != p.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), got: y.len() });
    }
    Ok(LN_2 + p.omega_bar.ln_normal_density(y) + ln_normal_cdf(p.alpha.dot(y)))
}

pub fn sample_sn<R: Rng + ?Sized>(p: &SnParams, n: usize, rng: &mut R) -> DMatrix<f64> {
    p.sample(n, rng)
}

/// Skew-t `ST_d(xi, Omega, alpha, nu)` with `Omega = omega Omega_bar omega`
/// and `alpha` acting on the standardized variable `omega^{-1}(y - xi)`.
#[derive(Debug, Clone)]
pub struct StParams {
    xi: DVector<f64>,
    omega: SpdMatrix,
    alpha: DVector<f64>,
    nu: f64,
}

impl StParams {
    pub fn new(xi: DVector<f64>, omega: SpdMatrix, alpha: DVector<f64>, nu: f64) -> Result<Self> {
        let d = omega.dim();
        for len in [xi.len(), alpha.len()] {
            if len != d {
                return Err(Error::DimensionMismatch { expected: d, got: len });
            }
        }
        if !(nu > 0.0) {
            return Err(Error::InvalidParams(format!("degrees of freedom must be > 0, got {nu}")));
        }
        if alpha.iter().chain(xi.iter()).any(|a| !a.is_finite()) {
            return Err(Error::InvalidParams("location or skewness is not finite".into()));
        }
        Ok(Self { xi, omega, alpha, nu })
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn xi(&self) -> &DVector<f64> {
        &self.xi
    }

    pub fn omega(&self) -> &SpdMatrix {
        &self.omega
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Scales `omega_i = sqrt(Omega_ii)`.
    pub fn scales(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| self.omega.matrix()[(i, i)].sqrt())
    }

    /// The standardized skew-normal numerator `SN(Omega_bar, alpha)`.
    pub fn standard_sn(&self) -> Result<SnParams> {
        let w = self.scales();
        let d = self.dim();
        let bar = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                1.0
            } else {
                self.omega.matrix()[(i, j)] / (w[i] * w[j])
            }
        });
        SnParams::new(SpdMatrix::new(bar)?, self.alpha.clone())
    }

    /// Univariate marginal of coordinate `i`.
    pub fn marginal(&self, i: usize) -> Result<StParams> {
        let delta = self.standard_sn()?.delta();
        let di = delta[i];
        let a = di / (1.0 - di * di).sqrt();
        let omega = SpdMatrix::new(DMatrix::from_element(1, 1, self.omega.matrix()[(i, i)]))?;
        StParams::new(DVector::from_element(1, self.xi[i]), omega, DVector::from_element(1, a), self.nu)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        let sn = self.standard_sn()?;
        let sampler = SnSampler::new(&sn);
        let w = self.scales();
        let gamma = Gamma::new(0.5 * self.nu, 2.0 / self.nu)
            .map_err(|e| Error::InvalidParams(e.to_string()))?;
        let mut out = DMatrix::zeros(n, self.dim());
        for i in 0..n {
            let x = sampler.draw(rng);
            let z: f64 = gamma.sample(rng);
            let s = 1.0 / z.sqrt();
            for j in 0..self.dim() {
                out[(i, j)] = self.xi[j] + w[j] * x[j] * s;
            }
        }
        Ok(out)
    }
}

/// `log[2 t_d(y - xi; Omega, nu) T(alpha^T omega^{-1}(y - xi) sqrt((nu+d)/(nu+Q)); nu+d)]`
/// with `Q = (y - xi)^T Omega^{-1} (y - xi)`.
pub fn st_log_density(y: &DVector<f64>, p: &StParams) -> Result<f64> {
    let d = p.dim();
    if y.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: y.len() });
    }
    let df = d as f64;
    let nu = p.nu;
    let r = y - &p.xi;
    let q = p.omega.quad_form(&r);
    let ln_t = ln_gamma(0.5 * (nu + df)) - ln_gamma(0.5 * nu)
        - 0.5 * df * (nu.ln() + std::f64::consts::PI.ln())
        - 0.5 * p.omega.log_det()
        - 0.5 * (nu + df) * (q / nu).ln_1p();
    let w = p.scales();
    let z = DVector::from_fn(d, |i, _| r[i] / w[i]);
    let arg = p.alpha.dot(&z) * ((nu + df) / (nu + q)).sqrt();
    Ok(LN_2 + ln_t + ln_student_t_cdf(arg, nu + df))
}

pub fn sample_st<R: Rng + ?Sized>(p: &StParams, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    p.sample(n, rng)
}

/// Inputs of `(zeta X0 + Delta_zeta X) / sqrt(Z)` with `X0 ~ N(0, 1)`,
/// `X ~ 2 phi_d(x; Omega) Phi(alpha^T x)` and `Z ~ Gamma(nu/2, nu/2)`.
#[derive(Debug, Clone)]
pub struct ConvolutionInput {
    pub zeta: DVector<f64>,
    pub omega: SpdMatrix,
    pub alpha: DVector<f64>,
    pub nu: f64,
}

/// Skew-t law of the convolution: `Omega* = Delta (Omega + lambda lambda^T) Delta`
/// and the skewness mapped back to the standardized parameterization.
pub fn convolve_sn_normal(input: &ConvolutionInput) -> Result<StParams> {
    let d = input.omega.dim();
    if input.zeta.len() != d || input.alpha.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: if input.zeta.len() != d { input.zeta.len() } else { input.alpha.len() },
        });
    }
    if input.zeta.iter().any(|z| !(z.abs() < 1.0)) {
        return Err(Error::InvalidParams("every zeta entry must lie in (-1, 1)".into()));
    }
    let lam = input.zeta.map(lambda);
    let scale = input.zeta.map(|z| (1.0 - z * z).sqrt());
    let om = input.omega.matrix();
    let star = DMatrix::from_fn(d, d, |i, j| scale[i] * (om[(i, j)] + lam[i] * lam[j]) * scale[j]);
    let star = SpdMatrix::new(star)?;

    let la = lam.dot(&input.alpha);
    let lql = input.omega.quad_form(&lam);
    let factor = (1.0 + la * la / (1.0 + lql)).powf(-0.5);
    let dom_a = (om * &input.alpha).component_mul(&scale);
    let alpha_direct = star.solve(&dom_a) * factor;
    let w = DVector::from_fn(d, |i, _| star.matrix()[(i, i)].sqrt());
    let alpha_std = alpha_direct.component_mul(&w);
    StParams::new(DVector::zeros(d), star, alpha_std, input.nu)
}
