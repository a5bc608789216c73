//! Homogenization datasets: sample generation, sharded storage, splits and
//! the per-component standardization applied before training.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dfm_solver::SolverOptions;
use crate::error::{Error, Result};
use crate::frac_geom::{generate_dfn, DfnSpec, Fracture};
use crate::geometry::Rect;
use crate::homogenizer::anisotropy_tensor;
use crate::random_field::{sample_tensor_field, Grid, SrfParams, TensorField};
use crate::rasterizer::{rasterize_block, RasterSample, SampleMeta, CHANNELS};
use crate::rng::{substream, substream_seed};

pub const RECORDS_PER_SHARD: usize = 1024;
pub const MANIFEST_VERSION: u32 = 1;

/// Fracture-to-matrix conductivity ratio of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RatioClass {
    A,
    B,
    C,
}

impl RatioClass {
    pub fn ratio(self) -> f64 {
        match self {
            RatioClass::A => 1e3,
            RatioClass::B => 1e5,
            RatioClass::C => 1e7,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(RatioClass::A),
            "B" | "b" => Ok(RatioClass::B),
            "C" | "c" => Ok(RatioClass::C),
            other => Err(Error::InvalidConfig(format!("unknown ratio class {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub ratio_class: RatioClass,
    pub n_samples: usize,
    pub lambdas: Vec<f64>,
    pub block_size: f64,
    pub raster: usize,
    pub solver_resolution: usize,
    pub dfn: DfnSpec,
    pub srf: SrfParams,
    pub max_skip_fraction: f64,
    pub test_fraction: f64,
    /// Fraction of the non-test samples used for validation.
    pub val_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            ratio_class: RatioClass::A,
            n_samples: 2048,
            lambdas: vec![0.0, 10.0, 25.0],
            block_size: 100.0 / 7.0,
            raster: 64,
            solver_resolution: 32,
            dfn: DfnSpec::default(),
            srf: SrfParams::default(),
            max_skip_fraction: 0.01,
            test_fraction: 0.2,
            val_fraction: 0.2,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::InvalidConfig("lambda list is empty".into()));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidConfig("correlation lengths must be non-negative".into()));
        }
        if self.raster < 8 {
            return Err(Error::InvalidConfig(format!("raster size {} is below 8", self.raster)));
        }
        if self.solver_resolution < 2 {
            return Err(Error::InvalidConfig("solver resolution must be at least 2".into()));
        }
        if !(self.block_size > 0.0) {
            return Err(Error::InvalidConfig("block size must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Geometry and field of one block-sized sample before homogenization.
#[derive(Clone, Debug)]
pub struct SampleParts {
    pub block: Rect,
    pub field: TensorField,
    pub fractures: Vec<Fracture>,
    pub lambda: f64,
    /// `median(K_f) / geomean(trace / 2)` after rescaling, if fractures exist.
    pub realized_ratio: Option<f64>,
}

/// Geometric mean of `trace / 2` over the field cells.
pub fn matrix_geomean(field: &TensorField) -> f64 {
    let s: f64 = field.values.iter().map(|k| (0.5 * k.trace()).ln()).sum();
    (s / field.values.len() as f64).exp()
}

pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Multiply every fracture conductivity by one factor so that
/// `median(K_f) / geomean(trace/2)` equals `ratio`.
pub fn enforce_ratio(fractures: &mut [Fracture], field: &TensorField, ratio: f64) -> Option<f64> {
    let med = median(fractures.iter().map(|f| f.conductivity).collect())?;
    let gm = matrix_geomean(field);
    let factor = ratio * gm / med;
    for f in fractures.iter_mut() {
        f.conductivity *= factor;
    }
    median(fractures.iter().map(|f| f.conductivity).collect()).map(|m| m / gm)
}

/// Draw the field and network for sample `position` (attempt `attempt`).
pub fn draw_sample(cfg: &DatasetConfig, master: u64, position: usize, attempt: u32) -> Result<SampleParts> {
    let lambda = cfg.lambdas[position % cfg.lambdas.len()];
    let seed = substream_seed(master, "dataset.sample", ((attempt as u64) << 40) | position as u64);
    let block = Rect::new(0.0, 0.0, cfg.block_size, cfg.block_size);
    let grid = Grid::covering(&block, cfg.raster)?;
    let params = SrfParams { correlation_length: lambda, ..cfg.srf };
    let field = sample_tensor_field(&grid, &params, substream_seed(seed, "dataset.srf", 0))?;
    let mut fractures = generate_dfn(&cfg.dfn, block, substream_seed(seed, "dataset.dfn", 0))?.fractures;
    let realized_ratio = enforce_ratio(&mut fractures, &field, cfg.ratio_class.ratio());
    Ok(SampleParts { block, field, fractures, lambda, realized_ratio })
}

/// Rounded to the 32-bit storage precision, so in-memory and on-disk
/// samples agree exactly.
fn round_f32(s: &mut RasterSample) {
    for v in s.planes.iter_mut() {
        *v = *v as f32 as f64;
    }
    if let Some(t) = s.target.as_mut() {
        for v in t.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub lambda: f64,
    pub seed: u64,
    pub attempt: u32,
    pub fractures: usize,
    pub realized_ratio: Option<f64>,
    pub target: [f64; 3],
}

/// Homogenize and rasterize one sample. Returns `None` for samples whose
/// fitted tensor has a non-positive diagonal.
pub fn build_sample(
    cfg: &DatasetConfig,
    master: u64,
    position: usize,
    attempt: u32,
    solver: &SolverOptions,
) -> Result<Option<(RasterSample, SampleRecord)>> {
    let parts = draw_sample(cfg, master, position, attempt)?;
    let eq = anisotropy_tensor(&parts.field, &parts.fractures, parts.block, cfg.solver_resolution, solver)?;
    if !(eq.k.xx > 0.0 && eq.k.yy > 0.0) {
        return Ok(None);
    }
    let mut raster = rasterize_block(&parts.field, &parts.fractures, &parts.block, cfg.raster)?;
    let seed = substream_seed(master, "dataset.sample", ((attempt as u64) << 40) | position as u64);
    raster.target = Some(eq.k.to_array());
    raster.meta = SampleMeta { ratio: cfg.ratio_class.ratio(), lambda: parts.lambda, seed, block: position as u64 };
    round_f32(&mut raster);
    let record = SampleRecord {
        index: position,
        lambda: parts.lambda,
        seed,
        attempt,
        fractures: parts.fractures.len(),
        realized_ratio: parts.realized_ratio,
        target: raster.target.unwrap(),
    };
    Ok(Some((raster, record)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded 64/16/20 split of `0..n`: test is 20% of all samples, validation
/// 20% of the rest. Each list is sorted.
pub fn split_indices(n: usize, seed: u64) -> Result<Split> {
    split_indices_with(n, seed, 0.2, 0.2)
}

pub fn split_indices_with(n: usize, seed: u64, test_fraction: f64, val_fraction: f64) -> Result<Split> {
    if n < 5 {
        return Err(Error::InvalidArgument(format!("cannot split {n} samples (need at least 5)")));
    }
    if !(0.0..1.0).contains(&test_fraction) || !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidConfig("split fractions must lie in [0, 1)".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "dataset.split", 0));
    let n_test = (test_fraction * n as f64).round() as usize;
    let n_val = (val_fraction * (n - n_test) as f64).round() as usize;
    if n_test + n_val >= n {
        return Err(Error::InvalidConfig(format!("split of {n} samples leaves no training data")));
    }
    let mut test = idx[..n_test].to_vec();
    let mut val = idx[n_test..n_test + n_val].to_vec();
    let mut train = idx[n_test + n_val..].to_vec();
    test.sort_unstable();
    val.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, val, test })
}

/// Mean and population standard deviation of `[log k_xx, k_xy, log k_yy]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub input: ComponentStats,
    pub output: ComponentStats,
}

impl PreprocessStats {
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("stats serialize").as_bytes())
    }
}

/// Running mean and squared deviation per component (pairwise merge).
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    n: f64,
    mean: [f64; 3],
    m2: [f64; 3],
}

impl Moments {
    fn from_values(values: &[[f64; 3]]) -> Self {
        let n = values.len() as f64;
        if n == 0.0 {
            return Self::default();
        }
        let mut mean = [0.0; 3];
        for v in values {
            for c in 0..3 {
                mean[c] += v[c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut m2 = [0.0; 3];
        for v in values {
            for c in 0..3 {
                m2[c] += (v[c] - mean[c]).powi(2);
            }
        }
        Self { n, mean, m2 }
    }

    fn merge(&mut self, o: &Moments) {
        if o.n == 0.0 {
            return;
        }
        let n = self.n + o.n;
        for c in 0..3 {
            let d = o.mean[c] - self.mean[c];
            self.mean[c] += d * o.n / n;
            self.m2[c] += o.m2[c] + d * d * self.n * o.n / n;
        }
        self.n = n;
    }

    fn finish(&self) -> Result<ComponentStats> {
        let mut std = [0.0; 3];
        for c in 0..3 {
            std[c] = (self.m2[c] / self.n).sqrt();
            if !(std[c] > 0.0) {
                return Err(Error::ZeroVariance { component: c });
            }
        }
        Ok(ComponentStats { mean: self.mean, std })
    }
}

/// Accumulates preprocessing statistics one sample at a time: every pixel's
/// tensor channels feed the input side, the target feeds the output side.
#[derive(Clone, Debug, Default)]
pub struct StatsAccumulator {
    input: Moments,
    output: Moments,
}

impl StatsAccumulator {
    pub fn push(&mut self, s: &RasterSample) -> Result<()> {
        let r = s.r;
        let n = r * r;
        let xm = matrix_mean(&s.planes, r)?;
        let mut px = Vec::with_capacity(n);
        for p in 0..n {
            px.push(transformed([s.planes[p], s.planes[n + p], s.planes[2 * n + p]], xm, p % r, p / r)?);
        }
        self.input.merge(&Moments::from_values(&px));
        if let Some(k) = s.target {
            self.output.merge(&Moments::from_values(&[transformed(k, xm, usize::MAX, usize::MAX)?]));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<PreprocessStats> {
        if self.output.n == 0.0 {
            return Err(Error::EmptySplit("train"));
        }
        Ok(PreprocessStats { input: self.input.finish()?, output: self.output.finish()? })
    }
}

/// Statistics over `samples`.
pub fn compute_stats<'a>(samples: impl IntoIterator<Item = &'a RasterSample>) -> Result<PreprocessStats> {
    let mut acc = StatsAccumulator::default();
    for s in samples {
        acc.push(s)?;
    }
    acc.finish()
}

/// Mean of `(k_xx + k_xy + k_yy) / 3` over matrix pixels.
pub fn matrix_mean(planes: &[f64], r: usize) -> Result<f64> {
    let n = r * r;
    let mut s = 0.0;
    let mut count = 0usize;
    for p in 0..n {
        if planes[3 * n + p] == 1.0 {
            s += (planes[p] + planes[n + p] + planes[2 * n + p]) / 3.0;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("sample has no matrix pixels".into()));
    }
    Ok(s / count as f64)
}

fn transformed(k: [f64; 3], xm: f64, px: usize, py: usize) -> Result<[f64; 3]> {
    let (xx, xy, yy) = (k[0] / xm, k[1] / xm, k[2] / xm);
    if !(xx > 0.0) {
        return Err(Error::NonPositive { component: "k_xx", value: xx, px, py });
    }
    if !(yy > 0.0) {
        return Err(Error::NonPositive { component: "k_yy", value: yy, px, py });
    }
    Ok([xx.ln(), xy, yy.ln()])
}

/// Standardized planes and target of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub planes: Vec<f64>,
    pub target: Option<[f64; 3]>,
    pub xm: f64,
}

pub fn preprocess(sample: &RasterSample, stats: &PreprocessStats) -> Result<Preprocessed> {
    let r = sample.r;
    let n = r * r;
    let xm = matrix_mean(&sample.planes, r)?;
    let mut planes = vec![0.0; CHANNELS * n];
    let s = &stats.input;
    for p in 0..n {
        let k = [sample.planes[p], sample.planes[n + p], sample.planes[2 * n + p]];
        let t = transformed(k, xm, p % r, p / r)?;
        for c in 0..3 {
            planes[c * n + p] = (t[c] - s.mean[c]) / s.std[c];
        }
        planes[3 * n + p] = sample.planes[3 * n + p];
    }
    let target = match sample.target {
        Some(k) => Some(standardize_target(k, xm, stats)?),
        None => None,
    };
    Ok(Preprocessed { planes, target, xm })
}

pub fn standardize_target(k: [f64; 3], xm: f64, stats: &PreprocessStats) -> Result<[f64; 3]> {
    let t = transformed(k, xm, usize::MAX, usize::MAX)?;
    let s = &stats.output;
    Ok([(t[0] - s.mean[0]) / s.std[0], (t[1] - s.mean[1]) / s.std[1], (t[2] - s.mean[2]) / s.std[2]])
}

/// Raw tensor components from a standardized target and the sample's `X̄_m`.
pub fn inverse_target(z: [f64; 3], xm: f64, stats: &PreprocessStats) -> [f64; 3] {
    let s = &stats.output;
    [
        (z[0] * s.std[0] + s.mean[0]).exp() * xm,
        (z[1] * s.std[1] + s.mean[1]) * xm,
        (z[2] * s.std[2] + s.mean[2]).exp() * xm,
    ]
}

/// Inverse of [`preprocess`].
pub fn inverse_preprocess(p: &Preprocessed, r: usize, stats: &PreprocessStats) -> RasterSample {
    let n = r * r;
    let s = &stats.input;
    let mut planes = vec![0.0; CHANNELS * n];
    for q in 0..n {
        planes[q] = (p.planes[q] * s.std[0] + s.mean[0]).exp() * p.xm;
        planes[n + q] = (p.planes[n + q] * s.std[1] + s.mean[1]) * p.xm;
        planes[2 * n + q] = (p.planes[2 * n + q] * s.std[2] + s.mean[2]).exp() * p.xm;
        planes[3 * n + q] = p.planes[3 * n + q];
    }
    RasterSample {
        r,
        planes,
        target: p.target.map(|z| inverse_target(z, p.xm, stats)),
        meta: SampleMeta::default(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub records: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub ratio_class: RatioClass,
    pub ratio: f64,
    pub n_samples: usize,
    pub raster: usize,
    pub lambdas: Vec<f64>,
    pub lambda_counts: Vec<usize>,
    pub split: Split,
    pub stats: PreprocessStats,
    pub stats_hash: String,
    pub master_seed: u64,
    pub config_hash: String,
    pub config: DatasetConfig,
    pub skipped: usize,
    pub shards: Vec<ShardInfo>,
    pub samples: Vec<SampleRecord>,
    pub scheme: String,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn record_len(&self) -> usize {
        record_len(self.raster)
    }
}

pub fn record_len(r: usize) -> usize {
    CHANNELS * r * r + 3
}

fn encode(s: &RasterSample, out: &mut Vec<u8>) {
    let t = s.target.unwrap_or([f64::NAN; 3]);
    for v in s.planes.iter().chain(t.iter()) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn decode(bytes: &[u8], r: usize, meta: SampleMeta) -> RasterSample {
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let m = vals.len() - 3;
    let t = [vals[m], vals[m + 1], vals[m + 2]];
    RasterSample {
        r,
        planes: vals[..m].to_vec(),
        target: if t.iter().any(|v| v.is_nan()) { None } else { Some(t) },
        meta,
    }
}

pub fn shard_name(i: usize) -> String {
    format!("shard_{i:05}.bin")
}

/// Builds sample `pos`, redrawing up to `max_skips` times when the solve
/// fails or the fitted tensor is unusable.  Returns the number of redraws.
fn build_with_retries(
    cfg: &DatasetConfig,
    seed: u64,
    pos: usize,
    max_skips: usize,
    solver: &SolverOptions,
) -> Result<(RasterSample, SampleRecord, usize)> {
    let mut skips = 0usize;
    for attempt in 0..=max_skips as u32 {
        match build_sample(cfg, seed, pos, attempt, solver) {
            Ok(Some((s, r))) => return Ok((s, r, skips)),
            Ok(None) => log::warn!("sample {pos} attempt {attempt}: non-positive target, skipped"),
            Err(e @ (Error::NonConvergence { .. } | Error::Indefinite { .. })) => {
                log::warn!("sample {pos} attempt {attempt}: {e}, skipped")
            }
            Err(e) => return Err(e),
        }
        skips += 1;
    }
    Err(Error::TooManyFailures { failed: skips, total: cfg.n_samples })
}

/// All `cfg.n_samples` samples in memory, in position order.
pub fn build_samples(cfg: &DatasetConfig, seed: u64, solver: &SolverOptions) -> Result<Vec<RasterSample>> {
    cfg.validate()?;
    let max_skips = (cfg.max_skip_fraction * cfg.n_samples as f64).floor() as usize;
    let built: Vec<_> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|pos| build_with_retries(cfg, seed, pos, max_skips, solver))
        .collect::<Result<_>>()?;
    let skipped: usize = built.iter().map(|b| b.2).sum();
    if skipped > max_skips {
        return Err(Error::TooManyFailures { failed: skipped, total: cfg.n_samples });
    }
    Ok(built.into_iter().map(|b| b.0).collect())
}

/// Generate `cfg.n_samples` samples under `dir`, writing shards, the manifest
/// and the statistics file.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64, dir: &Path, solver: &SolverOptions) -> Result<DatasetManifest> {
    cfg.validate()?;
    let split = split_indices_with(cfg.n_samples, seed, cfg.test_fraction, cfg.val_fraction)?;
    let shard_dir = dir.join("shards");
    fs::create_dir_all(&shard_dir)?;
    let max_skips = (cfg.max_skip_fraction * cfg.n_samples as f64).floor() as usize;
    let mut skipped = 0usize;
    let mut shards = Vec::new();
    let mut records = Vec::with_capacity(cfg.n_samples);
    let mut stats_acc = StatsAccumulator::default();
    let rl = record_len(cfg.raster);

    for (si, start) in (0..cfg.n_samples).step_by(RECORDS_PER_SHARD).enumerate() {
        let end = (start + RECORDS_PER_SHARD).min(cfg.n_samples);
        let built: Vec<Result<(RasterSample, SampleRecord, usize)>> = (start..end)
            .into_par_iter()
            .map(|pos| build_with_retries(cfg, seed, pos, max_skips, solver))
            .collect();
        let mut bytes = Vec::with_capacity((end - start) * rl * 4);
        for b in built {
            let (sample, rec, skips) = b?;
            skipped += skips;
            if skipped > max_skips {
                return Err(Error::TooManyFailures { failed: skipped, total: cfg.n_samples });
            }
            encode(&sample, &mut bytes);
            if split.train.binary_search(&rec.index).is_ok() {
                stats_acc.push(&sample)?;
            }
            records.push(rec);
        }
        let name = shard_name(si);
        fs::write(shard_dir.join(&name), &bytes)?;
        shards.push(ShardInfo { file: format!("shards/{name}"), records: end - start, sha256: sha256_hex(&bytes) });
    }

    let stats = stats_acc.finish()?;
    let lambda_counts = cfg
        .lambdas
        .iter()
        .map(|l| records.iter().filter(|r| r.lambda == *l).count())
        .collect();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        ratio_class: cfg.ratio_class,
        ratio: cfg.ratio_class.ratio(),
        n_samples: cfg.n_samples,
        raster: cfg.raster,
        lambdas: cfg.lambdas.clone(),
        lambda_counts,
        split,
        stats_hash: stats.hash(),
        stats,
        master_seed: seed,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        skipped,
        shards,
        samples: records,
        scheme: crate::SCHEME.into(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("stats.json"), &manifest.stats)?;
    Ok(manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Random access to the records of a generated dataset.
pub struct DatasetReader {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl DatasetReader {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self { dir: dir.to_path_buf(), manifest: DatasetManifest::load(dir)? })
    }

    /// Check shard hashes against the manifest.
    pub fn verify(&self) -> Result<()> {
        for s in &self.manifest.shards {
            let path = self.dir.join(&s.file);
            let bytes = fs::read(&path)?;
            if sha256_hex(&bytes) != s.sha256 {
                return Err(Error::Corrupt { path, message: "shard hash mismatch".into() });
            }
        }
        Ok(())
    }

    /// Records `indices` (sorted ascending for sequential access).
    pub fn read(&self, indices: &[usize]) -> Result<Vec<RasterSample>> {
        let r = self.manifest.raster;
        let bytes_per = record_len(r) * 4;
        let mut out = Vec::with_capacity(indices.len());
        let mut open: Option<(usize, BufReader<File>, usize)> = None;
        let mut buf = vec![0u8; bytes_per];
        for &idx in indices {
            if idx >= self.manifest.n_samples {
                return Err(Error::InvalidArgument(format!("record {idx} out of range")));
            }
            let shard = idx / RECORDS_PER_SHARD;
            let local = idx % RECORDS_PER_SHARD;
            let reopen = !matches!(&open, Some((s, _, pos)) if *s == shard && *pos <= local);
            if reopen {
                let path = self.dir.join(&self.manifest.shards[shard].file);
                open = Some((shard, BufReader::new(File::open(path)?), 0));
            }
            let (_, rd, pos) = open.as_mut().unwrap();
            while *pos < local {
                rd.read_exact(&mut buf)?;
                *pos += 1;
            }
            rd.read_exact(&mut buf)?;
            *pos += 1;
            let rec = &self.manifest.samples[idx];
            let meta = SampleMeta { ratio: self.manifest.ratio, lambda: rec.lambda, seed: rec.seed, block: idx as u64 };
            out.push(decode(&buf, r, meta));
        }
        Ok(out)
    }
}

/// Preprocessed samples held as 32-bit inputs for training.
#[derive(Clone, Debug)]
pub struct TensorSet {
    pub r: usize,
    pub inputs: Vec<f32>,
    pub targets: Vec<[f64; 3]>,
    pub raw_targets: Vec<[f64; 3]>,
    pub xm: Vec<f64>,
}

impl TensorSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f32] {
        let n = CHANNELS * self.r * self.r;
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn from_samples(samples: &[RasterSample], stats: &PreprocessStats) -> Result<Self> {
        let r = samples.first().map_or(0, |s| s.r);
        let mut set = TensorSet { r, inputs: Vec::new(), targets: Vec::new(), raw_targets: Vec::new(), xm: Vec::new() };
        for s in samples {
            let p = preprocess(s, stats)?;
            set.inputs.extend(p.planes.iter().map(|&v| v as f32));
            let raw = s.target.ok_or_else(|| Error::InvalidArgument("sample without target".into()))?;
            set.targets.push(p.target.unwrap());
            set.raw_targets.push(raw);
            set.xm.push(p.xm);
        }
        Ok(set)
    }

    pub fn load(reader: &DatasetReader, indices: &[usize], stats: &PreprocessStats) -> Result<Self> {
        let mut set = TensorSet {
            r: reader.manifest.raster,
            inputs: Vec::new(),
            targets: Vec::new(),
            raw_targets: Vec::new(),
            xm: Vec::new(),
        };
        for chunk in indices.chunks(256) {
            let part = TensorSet::from_samples(&reader.read(chunk)?, stats)?;
            set.inputs.extend(part.inputs);
            set.targets.extend(part.targets);
            set.raw_targets.extend(part.raw_targets);
            set.xm.extend(part.xm);
        }
        Ok(set)
    }
}
