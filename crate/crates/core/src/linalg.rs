//! Spatial layout, great-circle distances, Matérn correlation and dense
//! symmetric positive-definite matrix kernels.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{bessel_k, ln_gamma};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
const CHOLESKY_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LonLat {
    pub lon: f64,
    pub lat: f64,
}

impl LonLat {
    pub fn new(lon: f64, lat: f64) -> Self {
        Self { lon, lat }
    }
}

/// Haversine distance on a sphere of radius 6371 km.
pub fn great_circle_distance(a: LonLat, b: LonLat) -> Result<f64> {
    for p in [a, b] {
        if !(-90.0..=90.0).contains(&p.lat) || !p.lon.is_finite() {
            return Err(Error::invalid(format!("latitude {} out of [-90, 90]", p.lat)));
        }
    }
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let s1 = (0.5 * dphi).sin();
    let s2 = (0.5 * dlambda).sin();
    let h = (s1 * s1 + phi1.cos() * phi2.cos() * s2 * s2).min(1.0);
    Ok(2.0 * EARTH_RADIUS_KM * h.sqrt().asin())
}

/// Pairwise distance matrix in kilometres.
pub fn distance_matrix(points: &[LonLat]) -> Result<DMatrix<f64>> {
    let n = points.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let h = great_circle_distance(points[i], points[j])?;
            d[(i, j)] = h;
            d[(j, i)] = h;
        }
    }
    Ok(d)
}

fn default_smoothness() -> f64 {
    1.5
}

fn default_variance() -> f64 {
    1.0
}

/// Matérn correlation: range in km, smoothness, variance multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternSpec {
    pub range_km: f64,
    #[serde(default = "default_smoothness")]
    pub smoothness: f64,
    #[serde(default = "default_variance")]
    pub variance: f64,
}

impl MaternSpec {
    pub fn new(range_km: f64, smoothness: f64) -> Result<Self> {
        let spec = Self { range_km, smoothness, variance: 1.0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_variance(mut self, variance: f64) -> Result<Self> {
        self.variance = variance;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.range_km > 0.0 && self.range_km.is_finite()) {
            return Err(Error::invalid(format!("Matérn range must be > 0, got {}", self.range_km)));
        }
        if !(self.smoothness > 0.0 && self.smoothness.is_finite()) {
            return Err(Error::invalid(format!(
                "Matérn smoothness must be > 0, got {}",
                self.smoothness
            )));
        }
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::invalid(format!("Matérn variance must be > 0, got {}", self.variance)));
        }
        Ok(())
    }

    pub fn correlation(&self, h: f64) -> f64 {
        matern_correlation(h, self)
    }
}

/// Normalized Matérn `2^{1-nu}/Gamma(nu) (h/phi)^nu K_nu(h/phi)`, times the
/// variance multiplier. Equal to the multiplier at `h = 0`.
pub fn matern_correlation(h: f64, spec: &MaternSpec) -> f64 {
    debug_assert!(h >= 0.0, "negative distance {h}");
    if h <= 0.0 {
        return spec.variance;
    }
    let nu = spec.smoothness;
    let x = h / spec.range_km;
    let k = bessel_k(nu, x);
    if k == 0.0 {
        return 0.0;
    }
    let ln_rho = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * x.ln() + k.ln();
    spec.variance * ln_rho.exp().min(1.0)
}

/// Apply the Matérn function element-wise to a distance matrix.
pub fn matern_from_distances(distances: &DMatrix<f64>, spec: &MaternSpec) -> DMatrix<f64> {
    let n = distances.nrows();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = spec.variance;
        for j in (i + 1)..n {
            let v = matern_correlation(distances[(i, j)], spec);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Correlation matrix of `points` under `spec`.
pub fn build_correlation_matrix(points: &[LonLat], spec: &MaternSpec) -> Result<SpdMatrix> {
    let d = distance_matrix(points)?;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            if d[(i, j)] == 0.0 {
                return Err(Error::DuplicatePoints(i, j));
            }
        }
    }
    SpdMatrix::new(matern_from_distances(&d, spec))
}

/// Dense symmetric positive-definite matrix with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
    jittered: bool,
}

impl SpdMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: matrix.ncols() });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite { n });
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let mut asym = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                asym = asym.max((matrix[(i, j)] - matrix[(j, i)]).abs() / scale);
            }
        }
        if asym > 1e-12 {
            return Err(Error::NotSymmetric(asym));
        }
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        let (chol, jittered) = match Cholesky::new(matrix.clone()) {
            Some(c) => (c, false),
            None => {
                let mut j = matrix.clone();
                for i in 0..n {
                    j[(i, i)] += CHOLESKY_JITTER;
                }
                match Cholesky::new(j) {
                    Some(c) => {
                        log::debug!("Cholesky needed {CHOLESKY_JITTER:e} diagonal jitter (n = {n})");
                        (c, true)
                    }
                    None => return Err(Error::NotPositiveDefinite { n }),
                }
            }
        };
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self { matrix, chol, log_det, jittered })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Whether the diagonal jitter was needed to factorize.
    pub fn jittered(&self) -> bool {
        self.jittered
    }

    /// Lower Cholesky factor `L` with `M = L L^T`.
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        (&inv + inv.transpose()) * 0.5
    }

    /// `v^T M^{-1} v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        let w = self
            .chol
            .l_dirty()
            .solve_lower_triangular(v)
            .expect("triangular factor has positive diagonal");
        w.norm_squared()
    }

    /// Gaussian log-density `log N(v; 0, M)`.
    pub fn ln_normal_density(&self, v: &DVector<f64>) -> f64 {
        -0.5 * (self.dim() as f64 * crate::special::LN_2PI + self.log_det + self.quad_form(v))
    }
}

/// Rescale a symmetric PSD matrix to unit diagonal.
pub fn to_correlation(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let s: Vec<f64> = (0..n).map(|i| m[(i, i)].max(f64::MIN_POSITIVE).sqrt()).collect();
    DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { m[(i, j)] / (s[i] * s[j]) })
}

/// One observation site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    pub region: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayoutFile {
    sites: Vec<Site>,
    #[serde(default)]
    centroids: Vec<LonLat>,
}

/// Sites partitioned into contiguous regions `0..R`.
///
/// Sites are stored grouped by region, so region `r` occupies the column
/// range [`SpatialLayout::region_range`] of every data row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayoutFile", into = "LayoutFile")]
pub struct SpatialLayout {
    sites: Vec<Site>,
    region_starts: Vec<usize>,
    centroids: Vec<LonLat>,
}

impl TryFrom<LayoutFile> for SpatialLayout {
    type Error = Error;
    fn try_from(f: LayoutFile) -> Result<Self> {
        let layout = SpatialLayout::new(f.sites)?;
        if !f.centroids.is_empty() && f.centroids.len() != layout.n_regions() {
            return Err(Error::invalid("centroid count does not match region count"));
        }
        Ok(layout)
    }
}

impl From<SpatialLayout> for LayoutFile {
    fn from(l: SpatialLayout) -> Self {
        LayoutFile { sites: l.sites, centroids: l.centroids }
    }
}

impl SpatialLayout {
    pub fn new(sites: Vec<Site>) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::invalid("layout has no sites"));
        }
        let mut region_starts = vec![0];
        let mut current = 0usize;
        if sites[0].region != 0 {
            return Err(Error::invalid("region indices must start at 0"));
        }
        for (i, s) in sites.iter().enumerate() {
            if !(-90.0..=90.0).contains(&s.lat) || !s.lon.is_finite() {
                return Err(Error::invalid(format!("site {} has invalid coordinates", s.id)));
            }
            if s.region == current {
                continue;
            }
            if s.region != current + 1 {
                return Err(Error::invalid(format!(
                    "sites must be grouped by contiguous region index; site {} has region {} after {}",
                    s.id, s.region, current
                )));
            }
            current = s.region;
            region_starts.push(i);
        }
        let mut ids: Vec<&str> = sites.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("site ids must be unique"));
        }
        let mut layout = Self { sites, region_starts, centroids: Vec::new() };
        layout.centroids = (0..layout.n_regions())
            .map(|r| {
                let sites = &layout.sites[layout.region_range(r)];
                let n = sites.len() as f64;
                LonLat::new(
                    sites.iter().map(|s| s.lon).sum::<f64>() / n,
                    sites.iter().map(|s| s.lat).sum::<f64>() / n,
                )
            })
            .collect();
        Ok(layout)
    }

    /// Regions made of regular lon/lat grids: region `r` takes every pair of
    /// `lons[r] x lats`. Site ids are `r{region}_{row}_{col}`.
    pub fn from_grids(lats: &[f64], lons: &[Vec<f64>]) -> Result<Self> {
        let mut sites = Vec::new();
        for (r, region_lons) in lons.iter().enumerate() {
            for (i, &lat) in lats.iter().enumerate() {
                for (j, &lon) in region_lons.iter().enumerate() {
                    sites.push(Site { id: format!("r{r}_{i}_{j}"), lon, lat, region: r });
                }
            }
        }
        Self::new(sites)
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_regions(&self) -> usize {
        self.region_starts.len()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn region_of(&self, site: usize) -> usize {
        self.sites[site].region
    }

    pub fn region_range(&self, r: usize) -> std::ops::Range<usize> {
        let start = self.region_starts[r];
        let end = self.region_starts.get(r + 1).copied().unwrap_or(self.sites.len());
        start..end
    }

    pub fn region_size(&self, r: usize) -> usize {
        self.region_range(r).len()
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        (0..self.n_regions()).map(|r| self.region_size(r)).collect()
    }

    pub fn centroids(&self) -> &[LonLat] {
        &self.centroids
    }

    pub fn region_points(&self, r: usize) -> Vec<LonLat> {
        self.sites[self.region_range(r)].iter().map(|s| LonLat::new(s.lon, s.lat)).collect()
    }

    pub fn region_distances(&self, r: usize) -> DMatrix<f64> {
        distance_matrix(&self.region_points(r)).expect("layout coordinates validated")
    }

    pub fn centroid_distances(&self) -> DMatrix<f64> {
        distance_matrix(&self.centroids).expect("centroids are valid coordinates")
    }
}

/// Median of the strictly upper-triangular entries (0 for a 1x1 matrix).
pub fn median_offdiagonal(d: &DMatrix<f64>) -> f64 {
    let mut v: Vec<f64> = Vec::new();
    for i in 0..d.nrows() {
        for j in (i + 1)..d.ncols() {
            v.push(d[(i, j)]);
        }
    }
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
