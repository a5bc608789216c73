//! Correlated Gaussian fields and the matrix conductivity tensor field.
//!
//! Scalar fields are stationary, zero mean and unit variance with covariance
//! `C(h) = exp(-h²/λ²)`. They are sampled by circulant embedding on a padded
//! periodic grid; a dense Cholesky factorization is used when the embedding
//! has a significantly negative spectrum.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Rect};
use crate::rng::{substream, substream_seed};
use crate::tensor::SymTensor2;

/// Largest grid (in cells) handled by the dense fallback.
pub const DENSE_FALLBACK_MAX_CELLS: usize = 64 * 64;

/// Relative tolerance on negative circulant eigenvalues that are clamped to zero.
const EMBEDDING_NEG_TOL: f64 = 1e-8;

/// Largest padded periodic grid tried by circulant embedding.
const MAX_EMBEDDING_CELLS: usize = 1 << 24;

const SPECTRUM_CACHE_LEN: usize = 8;

/// Regular grid of square cells; values are stored row-major with `x` fastest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub cell: f64,
    pub origin: Point2,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, cell: f64, origin: Point2) -> Result<Self> {
        if nx == 0 || ny == 0 || !(cell > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "grid needs positive dimensions and cell size, got {nx}×{ny} cell {cell}"
            )));
        }
        Ok(Self { nx, ny, cell, origin })
    }

    /// `n × n` grid covering the square `rect`.
    pub fn covering(rect: &Rect, n: usize) -> Result<Self> {
        Self::new(n, n, rect.width() / n as f64, Point2::new(rect.x0, rect.y0))
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rect(&self) -> Rect {
        Rect::new(
            self.origin.x,
            self.origin.y,
            self.origin.x + self.nx as f64 * self.cell,
            self.origin.y + self.ny as f64 * self.cell,
        )
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Point2 {
        Point2::new(
            self.origin.x + (i as f64 + 0.5) * self.cell,
            self.origin.y + (j as f64 + 0.5) * self.cell,
        )
    }

    /// Index of the cell containing `p`, clamped to the grid.
    pub fn locate(&self, p: Point2) -> usize {
        let fi = ((p.x - self.origin.x) / self.cell).floor();
        let fj = ((p.y - self.origin.y) / self.cell).floor();
        let i = (fi.max(0.0) as usize).min(self.nx - 1);
        let j = (fj.max(0.0) as usize).min(self.ny - 1);
        j * self.nx + i
    }

    pub fn scaled(&self, s: f64) -> Grid {
        Grid {
            cell: self.cell * s,
            origin: Point2::new(self.origin.x * s, self.origin.y * s),
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorField {
    pub grid: Grid,
    pub values: Vec<SymTensor2<f64>>,
}

impl TensorField {
    pub fn uniform(grid: Grid, k: SymTensor2<f64>) -> Self {
        Self { values: vec![k; grid.len()], grid }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(Point2) -> SymTensor2<f64>) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                values.push(f(grid.cell_center(i, j)));
            }
        }
        Self { grid, values }
    }

    /// Nearest-cell lookup.
    pub fn at(&self, p: Point2) -> SymTensor2<f64> {
        self.values[self.grid.locate(p)]
    }

    /// Geometry scaled by `s` and tensors by `s²`.
    pub fn scaled(&self, s: f64) -> TensorField {
        TensorField {
            grid: self.grid.scaled(s),
            values: self.values.iter().map(|t| t.scale(s * s)).collect(),
        }
    }
}

/// Log-normal principal values and correlation length of the matrix field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrfParams {
    pub correlation_length: f64,
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl Default for SrfParams {
    fn default() -> Self {
        Self {
            correlation_length: 0.0,
            mean: [-6.0, -5.8],
            cov: [[0.25, 0.2], [0.2, 0.25]],
        }
    }
}

fn gaussian_cov(h2: f64, corr_len: f64) -> f64 {
    (-h2 / (corr_len * corr_len)).exp()
}

/// How a field was produced; useful for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMethod {
    WhiteNoise,
    CirculantEmbedding { padding: usize },
    DenseCholesky,
}

/// Zero-mean unit-variance Gaussian field with covariance `exp(-h²/λ²)`.
pub fn sample_gaussian_field(grid: &Grid, corr_len: f64, seed: u64) -> Result<ScalarField> {
    sample_gaussian_field_with_method(grid, corr_len, seed).map(|(f, _)| f)
}

pub fn sample_gaussian_field_with_method(
    grid: &Grid,
    corr_len: f64,
    seed: u64,
) -> Result<(ScalarField, SamplingMethod)> {
    if !(corr_len >= 0.0) || !corr_len.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "correlation length must be finite and non-negative, got {corr_len}"
        )));
    }
    let mut rng = substream(seed, "grf.noise", 0);
    if corr_len == 0.0 {
        let values = (0..grid.len()).map(|_| rng.sample(StandardNormal)).collect();
        return Ok((ScalarField { grid: *grid, values }, SamplingMethod::WhiteNoise));
    }
    // The periodic copy of exp(-h²/λ²) is only positive semi-definite once
    // the kernel has decayed at half the period, which needs a period of
    // roughly 8.6 λ.
    let extent = grid.nx.min(grid.ny) as f64 * grid.cell;
    let first = ((8.6 * corr_len / extent).ceil() as usize).max(2);
    for padding in first..first + 8 {
        let (m1, m2) = (padding * grid.nx, padding * grid.ny);
        if m1 * m2 > MAX_EMBEDDING_CELLS {
            break;
        }
        if let Some(eig) = cached_spectrum(grid, corr_len, m1, m2) {
            let values = sample_circulant(grid, &eig, m1, m2, &mut rng);
            return Ok((
                ScalarField { grid: *grid, values },
                SamplingMethod::CirculantEmbedding { padding },
            ));
        }
    }
    if grid.len() > DENSE_FALLBACK_MAX_CELLS {
        return Err(Error::FieldTooLarge { cells: grid.len() });
    }
    let values = sample_dense(grid, corr_len, &mut rng)?;
    Ok((ScalarField { grid: *grid, values }, SamplingMethod::DenseCholesky))
}

fn fft2(data: &mut [Complex<f64>], m1: usize, m2: usize, planner: &mut FftPlanner<f64>) {
    let row = planner.plan_fft_forward(m1);
    for r in data.chunks_exact_mut(m1) {
        row.process(r);
    }
    let col = planner.plan_fft_forward(m2);
    let mut buf = vec![Complex::new(0.0, 0.0); m2];
    for i in 0..m1 {
        for (k, b) in buf.iter_mut().enumerate() {
            *b = data[k * m1 + i];
        }
        col.process(&mut buf);
        for (k, b) in buf.iter().enumerate() {
            data[k * m1 + i] = *b;
        }
    }
}

type SpectrumKey = (usize, usize, u64, u64, usize, usize);

/// Spectra are reused across the four component fields of a realization and
/// across realizations on the same grid.
fn cached_spectrum(grid: &Grid, corr_len: f64, m1: usize, m2: usize) -> Option<Arc<Vec<f64>>> {
    static CACHE: Mutex<Vec<(SpectrumKey, Option<Arc<Vec<f64>>>)>> = Mutex::new(Vec::new());
    let key = (grid.nx, grid.ny, grid.cell.to_bits(), corr_len.to_bits(), m1, m2);
    if let Some((_, eig)) = CACHE.lock().unwrap().iter().find(|(k, _)| *k == key) {
        return eig.clone();
    }
    let eig = circulant_spectrum(grid, corr_len, m1, m2).map(Arc::new);
    let mut cache = CACHE.lock().unwrap();
    if !cache.iter().any(|(k, _)| *k == key) {
        if cache.len() >= SPECTRUM_CACHE_LEN {
            cache.remove(0);
        }
        cache.push((key, eig.clone()));
    }
    eig
}

/// Eigenvalues of the periodic embedding, or `None` if significantly negative.
fn circulant_spectrum(grid: &Grid, corr_len: f64, m1: usize, m2: usize) -> Option<Vec<f64>> {
    let mut c = vec![Complex::new(0.0, 0.0); m1 * m2];
    for k2 in 0..m2 {
        let dy = k2.min(m2 - k2) as f64 * grid.cell;
        for k1 in 0..m1 {
            let dx = k1.min(m1 - k1) as f64 * grid.cell;
            c[k2 * m1 + k1] = Complex::new(gaussian_cov(dx * dx + dy * dy, corr_len), 0.0);
        }
    }
    let mut planner = FftPlanner::new();
    fft2(&mut c, m1, m2, &mut planner);
    let max = c.iter().map(|z| z.re).fold(f64::MIN, f64::max);
    let min = c.iter().map(|z| z.re).fold(f64::MAX, f64::min);
    if min < -EMBEDDING_NEG_TOL * max {
        return None;
    }
    Some(c.into_iter().map(|z| z.re.max(0.0)).collect())
}

fn sample_circulant(grid: &Grid, eig: &[f64], m1: usize, m2: usize, rng: &mut impl Rng) -> Vec<f64> {
    let scale = 1.0 / (m1 * m2) as f64;
    let mut w: Vec<Complex<f64>> = eig
        .iter()
        .map(|&l| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            Complex::new(a, b) * (l * scale).sqrt()
        })
        .collect();
    let mut planner = FftPlanner::new();
    fft2(&mut w, m1, m2, &mut planner);
    let mut out = Vec::with_capacity(grid.len());
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            out.push(w[j * m1 + i].re);
        }
    }
    out
}

/// Lower Cholesky factor of a dense row-major SPD matrix, in place.
fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

fn sample_dense(grid: &Grid, corr_len: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let n = grid.len();
    let pts: Vec<Point2> = (0..grid.ny)
        .flat_map(|j| (0..grid.nx).map(move |i| (i, j)))
        .map(|(i, j)| grid.cell_center(i, j))
        .collect();
    let base: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (p, q) = (pts[idx / n], pts[idx % n]);
            let (dx, dy) = (p.x - q.x, p.y - q.y);
            gaussian_cov(dx * dx + dy * dy, corr_len)
        })
        .collect();
    // the Gaussian kernel is numerically singular for long correlation lengths
    for jitter in [0.0, 1e-12, 1e-10, 1e-8, 1e-6] {
        let mut a = base.clone();
        for i in 0..n {
            a[i * n + i] += jitter;
        }
        if cholesky_in_place(&mut a, n) {
            let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let out = (0..n)
                .map(|i| (0..=i).map(|k| a[i * n + k] * z[k]).sum())
                .collect();
            return Ok(out);
        }
    }
    Err(Error::FieldTooLarge { cells: n })
}

/// Lower Cholesky factor of a 2×2 SPD matrix.
pub fn cholesky2(cov: [[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let sym = (cov[0][1] - cov[1][0]).abs() <= 1e-14 * (cov[0][1].abs() + cov[1][0].abs()).max(1.0);
    if !sym || !(cov[0][0] > 0.0) {
        return Err(Error::InvalidArgument("covariance must be symmetric positive definite".into()));
    }
    let l00 = cov[0][0].sqrt();
    let l10 = cov[1][0] / l00;
    let d = cov[1][1] - l10 * l10;
    if !(d > 0.0) {
        return Err(Error::InvalidArgument("covariance must be symmetric positive definite".into()));
    }
    Ok([[l00, 0.0], [l10, d.sqrt()]])
}

/// The four standard Gaussian fields behind a tensor field.
pub struct FieldComponents {
    pub dir_x: ScalarField,
    pub dir_y: ScalarField,
    pub log_x: ScalarField,
    pub log_y: ScalarField,
}

/// Combines direction fields `X` and log-principal fields `k̃` into `K = Qᵀ Λ Q`.
///
/// `redraw_seed` feeds the guard that redraws a cell direction when `|X|`
/// underflows.
pub fn assemble_tensor_field(c: &FieldComponents, params: &SrfParams, redraw_seed: u64) -> Result<TensorField> {
    let grid = c.dir_x.grid;
    for f in [&c.dir_y, &c.log_x, &c.log_y] {
        if f.grid != grid {
            return Err(Error::InvalidArgument("component fields must share one grid".into()));
        }
    }
    let l = cholesky2(params.cov)?;
    let mut values = Vec::with_capacity(grid.len());
    for idx in 0..grid.len() {
        let (mut x, mut y) = (c.dir_x.values[idx], c.dir_y.values[idx]);
        let mut norm = x.hypot(y);
        if norm < 1e-300 {
            let mut rng = substream(redraw_seed, "srf.redraw", idx as u64);
            while norm < 1e-300 {
                x = rng.sample(StandardNormal);
                y = rng.sample(StandardNormal);
                norm = x.hypot(y);
            }
        }
        let (cth, sth) = (x / norm, y / norm);
        let (a, b) = (c.log_x.values[idx], c.log_y.values[idx]);
        let kx = (params.mean[0] + l[0][0] * a).exp();
        let ky = (params.mean[1] + l[1][0] * a + l[1][1] * b).exp();
        values.push(SymTensor2::from_principal(kx, ky, cth, sth));
    }
    Ok(TensorField { grid, values })
}

pub fn sample_components(grid: &Grid, corr_len: f64, seed: u64) -> Result<FieldComponents> {
    Ok(FieldComponents {
        dir_x: sample_gaussian_field(grid, corr_len, substream_seed(seed, "srf.dir_x", 0))?,
        dir_y: sample_gaussian_field(grid, corr_len, substream_seed(seed, "srf.dir_y", 0))?,
        log_x: sample_gaussian_field(grid, corr_len, substream_seed(seed, "srf.log_x", 0))?,
        log_y: sample_gaussian_field(grid, corr_len, substream_seed(seed, "srf.log_y", 0))?,
    })
}

/// Full matrix conductivity field for one realization.
pub fn sample_tensor_field(grid: &Grid, params: &SrfParams, seed: u64) -> Result<TensorField> {
    let comps = sample_components(grid, params.correlation_length, seed)?;
    assemble_tensor_field(&comps, params, seed)
}

/// JSON header written next to a binary tensor field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub nx: usize,
    pub ny: usize,
    pub cell: f64,
    pub origin: Point2,
    pub planes: Vec<String>,
    pub covariance: String,
    #[serde(default)]
    pub params: Option<SrfParams>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl FieldHeader {
    pub fn for_field(f: &TensorField, params: Option<SrfParams>, seed: Option<u64>) -> Self {
        Self {
            nx: f.grid.nx,
            ny: f.grid.ny,
            cell: f.grid.cell,
            origin: f.grid.origin,
            planes: vec!["k_xx".into(), "k_xy".into(), "k_yy".into()],
            covariance: "exp(-h^2/lambda^2)".into(),
            params,
            seed,
        }
    }
}

/// Writes the three planes as little-endian `f32`, row-major.
pub fn write_field_planes<W: Write>(f: &TensorField, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(f.values.len() * 12);
    for comp in 0..3 {
        for t in &f.values {
            buf.extend_from_slice(&(t.to_array()[comp] as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_field_planes<R: Read>(header: &FieldHeader, mut r: R) -> Result<TensorField> {
    let grid = Grid::new(header.nx, header.ny, header.cell, header.origin)?;
    let n = grid.len();
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 12 * n {
        return Err(Error::Corrupt {
            path: "<field planes>".into(),
            message: format!("expected {} bytes, found {}", 12 * n, bytes.len()),
        });
    }
    let get = |k: usize| f32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap()) as f64;
    let values = (0..n)
        .map(|i| SymTensor2::new(get(i), get(n + i), get(2 * n + i)))
        .collect();
    Ok(TensorField { grid, values })
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save_field(stem: &Path, f: &TensorField, header: &FieldHeader) -> Result<()> {
    std::fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(header)?)?;
    let file = std::fs::File::create(stem.with_extension("bin"))?;
    write_field_planes(f, std::io::BufWriter::new(file))
}

pub fn load_field(stem: &Path) -> Result<(TensorField, FieldHeader)> {
    let header: FieldHeader = serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)?;
    let file = std::fs::File::open(stem.with_extension("bin"))?;
    let f = read_field_planes(&header, std::io::BufReader::new(file))?;
    Ok((f, header))
}
