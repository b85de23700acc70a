//! The multi-resolution skew-t model: parameters, data, forward simulation,
//! the per-time joint density and the complete-data log-likelihood.

use std::io::{Read, Write};
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matern_from_distances, MaternSpec, SpatialLayout, SpdMatrix};
use crate::rng;
use crate::special::{ln_gamma, LN_2PI};

/// Parametric (Matérn) or free correlation structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorrelationModel {
    Matern(MaternSpec),
    Free { matrix: Vec<Vec<f64>> },
}

impl CorrelationModel {
    pub fn matern(range_km: f64, smoothness: f64) -> Result<Self> {
        Ok(Self::Matern(MaternSpec::new(range_km, smoothness)?))
    }

    pub fn free(m: &DMatrix<f64>) -> Self {
        Self::Free { matrix: (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect() }
    }

    pub fn is_matern(&self) -> bool {
        matches!(self, Self::Matern(_))
    }

    /// Materialize the matrix for the given pairwise distances.
    pub fn build(&self, distances: &DMatrix<f64>) -> Result<SpdMatrix> {
        let n = distances.nrows();
        match self {
            Self::Matern(spec) => {
                spec.validate()?;
                SpdMatrix::new(matern_from_distances(distances, spec))
            }
            Self::Free { matrix } => {
                if matrix.len() != n || matrix.iter().any(|row| row.len() != n) {
                    return Err(Error::DimensionMismatch { expected: n, got: matrix.len() });
                }
                SpdMatrix::new(DMatrix::from_fn(n, n, |i, j| matrix[i][j]))
            }
        }
    }

    /// Number of free parameters: 1 for Matérn (range), `n(n-1)/2` for a
    /// free correlation matrix.
    pub fn n_params(&self, n: usize) -> usize {
        match self {
            Self::Matern(_) => 1,
            Self::Free { .. } => n * (n - 1) / 2,
        }
    }
}

/// Whether `zeta_r` is a scalar times the ones vector or a free vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZetaMode {
    #[default]
    Tied,
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionParams {
    pub delta: Vec<f64>,
    pub zeta: Vec<f64>,
    pub nu: f64,
    pub psi: CorrelationModel,
}

/// Full SKT parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SktParams {
    pub regions: Vec<RegionParams>,
    pub sigma: CorrelationModel,
    #[serde(default)]
    pub zeta_mode: ZetaMode,
}

fn check_open_unit(name: &str, r: usize, v: &[f64]) -> Result<()> {
    if let Some(x) = v.iter().find(|x| !(x.abs() < 1.0)) {
        return Err(Error::InvalidParams(format!("{name} entry {x} in region {r} is outside (-1, 1)")));
    }
    Ok(())
}

impl SktParams {
    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn validate(&self, layout: &SpatialLayout) -> Result<()> {
        if self.regions.len() != layout.n_regions() {
            return Err(Error::DimensionMismatch { expected: layout.n_regions(), got: self.regions.len() });
        }
        for (r, p) in self.regions.iter().enumerate() {
            let d = layout.region_size(r);
            for len in [p.delta.len(), p.zeta.len()] {
                if len != d {
                    return Err(Error::DimensionMismatch { expected: d, got: len });
                }
            }
            check_open_unit("delta", r, &p.delta)?;
            check_open_unit("zeta", r, &p.zeta)?;
            if !(p.nu > 0.0 && p.nu.is_finite()) {
                return Err(Error::InvalidParams(format!("nu = {} in region {r}", p.nu)));
            }
            if self.zeta_mode == ZetaMode::Tied && p.zeta.iter().any(|z| *z != p.zeta[0]) {
                return Err(Error::InvalidParams(format!("tied zeta mode but region {r} has unequal entries")));
            }
        }
        Ok(())
    }

    /// Validate against `layout` and precompute every matrix the samplers
    /// and likelihoods need.
    pub fn compile(&self, layout: &SpatialLayout) -> Result<CompiledModel> {
        self.validate(layout)?;
        let regions = self
            .regions
            .iter()
            .enumerate()
            .map(|(r, p)| {
                let psi = p.psi.build(&layout.region_distances(r))?;
                RegionModel::new(
                    DVector::from_column_slice(&p.zeta),
                    DVector::from_column_slice(&p.delta),
                    p.nu,
                    psi,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let sigma = self.sigma.build(&layout.centroid_distances())?;
        for i in 0..sigma.dim() {
            if (sigma.matrix()[(i, i)] - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidParams("cross-region matrix must have unit diagonal".into()));
            }
        }
        CompiledModel::new(regions, sigma, layout)
    }

    /// Parameter count: per region `|delta| + |zeta| + 1 (nu) + |psi|`, plus
    /// the cross-region parameters. Tied zeta counts once per region.
    pub fn n_params(&self, layout: &SpatialLayout) -> usize {
        let per_region: usize = self
            .regions
            .iter()
            .enumerate()
            .map(|(r, p)| {
                let zeta = match self.zeta_mode {
                    ZetaMode::Tied => 1,
                    ZetaMode::Free => p.zeta.len(),
                };
                p.delta.len() + zeta + 1 + p.psi.n_params(layout.region_size(r))
            })
            .sum();
        per_region + self.sigma.n_params(self.regions.len())
    }
}

/// Precomputed quantities of one region.
#[derive(Debug, Clone)]
pub struct RegionModel {
    pub d: usize,
    pub nu: f64,
    pub zeta: DVector<f64>,
    pub delta: DVector<f64>,
    /// `Delta_zeta delta`.
    pub c: DVector<f64>,
    /// Diagonal of `Delta_{zeta,delta}`.
    pub scale: DVector<f64>,
    pub psi: SpdMatrix,
    /// `Delta_{zeta,delta} Psi Delta_{zeta,delta}`.
    pub upsilon: SpdMatrix,
    pub ui_zeta: DVector<f64>,
    pub ui_c: DVector<f64>,
    /// `zeta^T Upsilon^{-1} zeta`.
    pub za: f64,
    /// `zeta^T Upsilon^{-1} c`.
    pub ce: f64,
    /// `c^T Upsilon^{-1} c`.
    pub cc: f64,
}

impl RegionModel {
    pub fn new(zeta: DVector<f64>, delta: DVector<f64>, nu: f64, psi: SpdMatrix) -> Result<Self> {
        let d = zeta.len();
        if delta.len() != d || psi.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: psi.dim() });
        }
        let a = zeta.map(|z| (1.0 - z * z).sqrt());
        let b = delta.map(|x| (1.0 - x * x).sqrt());
        let c = a.component_mul(&delta);
        let scale = a.component_mul(&b);
        let ups = DMatrix::from_fn(d, d, |i, j| scale[i] * psi.matrix()[(i, j)] * scale[j]);
        let upsilon = SpdMatrix::new(ups)?;
        let ui_zeta = upsilon.solve(&zeta);
        let ui_c = upsilon.solve(&c);
        let za = zeta.dot(&ui_zeta);
        let ce = c.dot(&ui_zeta);
        let cc = c.dot(&ui_c);
        Ok(Self { d, nu, zeta, delta, c, scale, psi, upsilon, ui_zeta, ui_c, za, ce, cc })
    }

    /// Per-time scalars `(zeta^T U^{-1} y, c^T U^{-1} y, y^T U^{-1} y)`.
    pub fn data_scalars(&self, y: &DVector<f64>) -> RegionScalars {
        RegionScalars { zy: self.ui_zeta.dot(y), cy: self.ui_c.dot(y), yy: self.upsilon.quad_form(y) }
    }

    /// `x^T Upsilon^{-1} x` for `x = y - zeta eta0 - c eta1`.
    pub fn residual_quad(&self, s: &RegionScalars, eta0: f64, eta1: f64) -> f64 {
        let q = s.yy - 2.0 * eta0 * s.zy - 2.0 * eta1 * s.cy
            + eta0 * eta0 * self.za
            + 2.0 * eta0 * eta1 * self.ce
            + eta1 * eta1 * self.cc;
        q.max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionScalars {
    pub zy: f64,
    pub cy: f64,
    pub yy: f64,
}

/// Parameters materialized against a layout.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    pub regions: Vec<RegionModel>,
    pub sigma: SpdMatrix,
    /// `Sigma^{-1}`.
    pub lambda: DMatrix<f64>,
    pub ranges: Vec<Range<usize>>,
}

impl CompiledModel {
    pub fn new(regions: Vec<RegionModel>, sigma: SpdMatrix, layout: &SpatialLayout) -> Result<Self> {
        if sigma.dim() != regions.len() {
            return Err(Error::DimensionMismatch { expected: regions.len(), got: sigma.dim() });
        }
        let lambda = sigma.inverse();
        let ranges = (0..layout.n_regions()).map(|r| layout.region_range(r)).collect();
        Ok(Self { regions, sigma, lambda, ranges })
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn n_sites(&self) -> usize {
        self.ranges.last().map(|r| r.end).unwrap_or(0)
    }

    pub fn block(&self, y: &DVector<f64>, r: usize) -> DVector<f64> {
        y.rows(self.ranges[r].start, self.ranges[r].len()).into_owned()
    }
}

/// Observations `Y` (T x d) with their layout. Columns follow layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    layout: SpatialLayout,
    y: DMatrix<f64>,
}

impl Dataset {
    pub fn new(layout: SpatialLayout, y: DMatrix<f64>) -> Result<Self> {
        if y.ncols() != layout.n_sites() {
            return Err(Error::DimensionMismatch { expected: layout.n_sites(), got: y.ncols() });
        }
        if let Some(k) = y.iter().position(|v| !v.is_finite()) {
            let (row, col) = (k % y.nrows(), k / y.nrows());
            return Err(Error::invalid(format!("non-finite observation at t = {row}, site {col}")));
        }
        Ok(Self { layout, y })
    }

    pub fn layout(&self) -> &SpatialLayout {
        &self.layout
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn n_times(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_sites(&self) -> usize {
        self.y.ncols()
    }

    pub fn row(&self, t: usize) -> DVector<f64> {
        self.y.row(t).transpose()
    }

    pub fn region_block(&self, t: usize, r: usize) -> DVector<f64> {
        let range = self.layout.region_range(r);
        DVector::from_fn(range.len(), |i, _| self.y[(t, range.start + i)])
    }

    /// Write the wide CSV: optional `#` provenance line, header of site ids,
    /// one row per time point at 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W, provenance: Option<&str>) -> Result<()> {
        if let Some(p) = provenance {
            for line in p.lines() {
                writeln!(out, "# {line}")?;
            }
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.layout.sites().iter().map(|s| s.id.as_str()))?;
        for t in 0..self.n_times() {
            w.write_record(self.y.row(t).iter().map(|v| format!("{v:.16e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, layout: SpatialLayout) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).has_headers(true).from_reader(input);
        let header = rdr.headers()?.clone();
        let header_line = rdr.position().line().max(1) as usize;
        if header.len() != layout.n_sites() {
            return Err(Error::Parse {
                row: header_line,
                column: header.len().min(layout.n_sites()) + 1,
                message: format!("expected {} columns, found {}", layout.n_sites(), header.len()),
            });
        }
        for (j, (h, s)) in header.iter().zip(layout.sites()).enumerate() {
            if h.trim() != s.id {
                return Err(Error::Parse {
                    row: header_line,
                    column: j + 1,
                    message: format!("header '{h}' does not match site id '{}'", s.id),
                });
            }
        }
        let d = layout.n_sites();
        let mut values = Vec::new();
        let mut n = 0usize;
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec.position().map(|p| p.line() as usize).unwrap_or(n + 2);
            if rec.len() != d {
                return Err(Error::Parse {
                    row,
                    column: rec.len().min(d) + 1,
                    message: format!("expected {d} fields, found {}", rec.len()),
                });
            }
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    row,
                    column: j + 1,
                    message: format!("cannot parse '{field}' as a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse { row, column: j + 1, message: "non-finite value".into() });
                }
                values.push(v);
            }
            n += 1;
        }
        Self::new(layout, DMatrix::from_row_slice(n, d, &values))
    }
}

/// Latent variables of one time point, one entry per region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub eta0: Vec<f64>,
    pub eta1: Vec<f64>,
    pub z: Vec<f64>,
}

impl LatentState {
    pub fn validate(&self) -> Result<()> {
        if self.z.iter().any(|z| !(*z > 0.0 && z.is_finite())) {
            return Err(Error::InvalidArgument("mixing variable Z must be positive".into()));
        }
        if self.eta1.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::InvalidArgument("eta1 must be non-negative".into()));
        }
        if self.eta0.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidArgument("eta0 must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: Dataset,
    pub latents: Vec<LatentState>,
}

/// Draw `n_times` independent fields. Time point `t` uses its own stream, so
/// the output does not depend on the thread pool.
pub fn simulate(params: &SktParams, layout: &SpatialLayout, n_times: usize, seed: u64) -> Result<Simulation> {
    let model = params.compile(layout)?;
    let sigma_l = model.sigma.lower();
    let psi_l: Vec<DMatrix<f64>> = model.regions.iter().map(|m| m.psi.lower()).collect();
    let gammas = model
        .regions
        .iter()
        .map(|m| Gamma::new(0.5 * m.nu, 2.0 / m.nu).map_err(|e| Error::InvalidParams(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let d = layout.n_sites();
    let big_r = model.n_regions();
    let rows: Vec<(Vec<f64>, LatentState)> = (0..n_times)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, "simulate", t as u64);
            let e = DVector::from_fn(big_r, |_, _| StandardNormal.sample(&mut rng));
            let x0 = &sigma_l * e;
            let mut y = vec![0.0; d];
            let mut latent = LatentState { eta0: vec![0.0; big_r], eta1: vec![0.0; big_r], z: vec![0.0; big_r] };
            for (r, m) in model.regions.iter().enumerate() {
                let u0: f64 = StandardNormal.sample(&mut rng);
                let z: f64 = gammas[r].sample(&mut rng);
                let e = DVector::from_fn(m.d, |_, _| StandardNormal.sample(&mut rng));
                let u = &psi_l[r] * e;
                let s = 1.0 / z.sqrt();
                let start = model.ranges[r].start;
                for i in 0..m.d {
                    y[start + i] = (m.zeta[i] * x0[r] + m.c[i] * u0.abs() + m.scale[i] * u[i]) * s;
                }
                latent.eta0[r] = x0[r] * s;
                latent.eta1[r] = u0.abs() * s;
                latent.z[r] = z;
            }
            (y, latent)
        })
        .collect();
    let mut values = Vec::with_capacity(n_times * d);
    let mut latents = Vec::with_capacity(n_times);
    for (y, l) in rows {
        values.extend(y);
        latents.push(l);
    }
    let data = Dataset::new(layout.clone(), DMatrix::from_row_slice(n_times, d, &values))?;
    Ok(Simulation { data, latents })
}

/// `log p(y_t, eta0_t, eta1_t, Z_t | theta)`.
pub fn joint_log_density(y: &DVector<f64>, latent: &LatentState, model: &CompiledModel) -> Result<f64> {
    let big_r = model.n_regions();
    for len in [latent.eta0.len(), latent.eta1.len(), latent.z.len()] {
        if len != big_r {
            return Err(Error::DimensionMismatch { expected: big_r, got: len });
        }
    }
    if y.len() != model.n_sites() {
        return Err(Error::DimensionMismatch { expected: model.n_sites(), got: y.len() });
    }
    latent.validate()?;
    let mut total = 0.0;
    for (r, m) in model.regions.iter().enumerate() {
        let (z, e0, e1) = (latent.z[r], latent.eta0[r], latent.eta1[r]);
        let yr = model.block(y, r);
        let x = &yr - &m.zeta * e0 - &m.c * e1;
        let q = m.upsilon.quad_form(&x);
        let (nu, d) = (m.nu, m.d as f64);
        total += 0.5 * nu * (0.5 * nu).ln() - ln_gamma(0.5 * nu) - 0.5 * d * LN_2PI
            + 0.5 * (2.0 / std::f64::consts::PI).ln()
            - 0.5 * m.upsilon.log_det()
            + 0.5 * (nu + d) * z.ln()
            - 0.5 * z * (q + e1 * e1 + nu);
    }
    let w = DVector::from_fn(big_r, |r, _| latent.eta0[r] * latent.z[r].sqrt());
    total += -0.5 * big_r as f64 * LN_2PI - 0.5 * model.sigma.log_det() - 0.5 * model.sigma.quad_form(&w);
    Ok(total)
}

/// Complete-data log-likelihood summed over time, without additive
/// constants.
pub fn complete_data_loglik(data: &Dataset, latents: &[LatentState], model: &CompiledModel) -> Result<f64> {
    let n_t = data.n_times();
    if latents.len() != n_t {
        return Err(Error::DimensionMismatch { expected: n_t, got: latents.len() });
    }
    let tf = n_t as f64;
    let mut total = -0.5 * tf * model.sigma.log_det();
    for m in &model.regions {
        let nu = m.nu;
        total += tf * (0.5 * nu * (0.5 * nu).ln() - ln_gamma(0.5 * nu)) - 0.5 * tf * m.upsilon.log_det();
    }
    for (t, latent) in latents.iter().enumerate() {
        latent.validate()?;
        for (r, m) in model.regions.iter().enumerate() {
            let (z, e0, e1) = (latent.z[r], latent.eta0[r], latent.eta1[r]);
            let yr = data.region_block(t, r);
            let x = &yr - &m.zeta * e0 - &m.c * e1;
            let q = m.upsilon.quad_form(&x);
            total += 0.5 * (m.nu + m.d as f64) * z.ln() - 0.5 * z * (q + e1 * e1 + m.nu);
        }
        let w = DVector::from_fn(model.n_regions(), |r, _| latent.eta0[r] * latent.z[r].sqrt());
        total -= 0.5 * model.sigma.quad_form(&w);
    }
    Ok(total)
}
