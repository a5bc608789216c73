//! Macroscale comparisons of upscaling backends, timing of the two block
//! pathways and parameter sweeps of a trained surrogate.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{build_samples, enforce_ratio, preprocess, TensorSet};
use crate::error::{Error, Result};
use crate::frac_geom::{generate_dfn, Fracture};
use crate::homogenizer::{
    anisotropy_tensor, aquifer_kx, block_tensors, interpolate_blocks, select_fractures, upscale_domain, BlockBackend,
    BlockGrid, NumericBackend,
};
use crate::metrics::{compute_metrics, r2_nrmse, Metrics};
use crate::random_field::{sample_tensor_field, Grid, TensorField};
use crate::rasterizer::rasterize_block;
use crate::rng::substream_seed;
use crate::SurrogateModel;

/// Machine description stored with every timing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub cpu: String,
    pub threads: usize,
    pub os: String,
    pub arch: String,
}

pub fn fingerprint() -> Fingerprint {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|v| v.trim().to_string()))
        .unwrap_or_else(|| "unknown".into());
    Fingerprint {
        cpu,
        threads: rayon::current_num_threads(),
        os: std::env::consts::OS.into(),
        arch: std::env::consts::ARCH.into(),
    }
}

/// Fine-scale model over the extended domain of a block grid.
#[derive(Clone, Debug)]
pub struct MacroSample {
    pub field: TensorField,
    pub fractures: Vec<Fracture>,
    pub grid: BlockGrid,
}

/// Draws sample `index`: the field resolves every block with `raster.size`
/// cells per block side and the fracture conductivities follow the dataset's
/// ratio class.
pub fn draw_macro_sample(cfg: &RunConfig, grid: &BlockGrid, index: usize) -> Result<MacroSample> {
    let seed = substream_seed(cfg.seeds.master, "bench.sample", index as u64);
    let ext = grid.extended;
    let cells = ((ext.width() / grid.block_size) * cfg.raster.size as f64).round() as usize;
    let field = sample_tensor_field(&Grid::covering(&ext, cells)?, &cfg.srf.params(), substream_seed(seed, "bench.srf", 0))?;
    let mut fractures = generate_dfn(&cfg.dfn, ext, substream_seed(seed, "bench.dfn", 0))?.fractures;
    enforce_ratio(&mut fractures, &field, cfg.dataset.ratio_class.ratio());
    Ok(MacroSample { field, fractures, grid: grid.clone() })
}

/// Fractures kept explicit on the coarse level: those at or above the threshold.
fn coarse_fractures(cfg: &RunConfig, fractures: &[Fracture]) -> Vec<Fracture> {
    match cfg.blocks.threshold {
        Some(t) => select_fractures(fractures, &cfg.original_domain(), None).into_iter().filter(|f| f.length >= t).collect(),
        None => Vec::new(),
    }
}

fn upscaled(cfg: &RunConfig, s: &MacroSample, backend: &dyn BlockBackend) -> Result<(TensorField, usize)> {
    let up = upscale_domain(&s.field, &s.fractures, &s.grid, backend, cfg.blocks.threshold, cfg.blocks.coarse)?;
    Ok((up.coarse, up.projected))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AquiferRow {
    pub sample: usize,
    pub y: [f64; 2],
    pub kx: [f64; 2],
    pub projected: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AquiferReport {
    pub backends: [String; 2],
    pub rows: Vec<AquiferRow>,
    /// Agreement of `Y`, second backend predicting the first; `None` when
    /// the first backend's outflows do not vary.
    pub r2: Option<f64>,
    pub nrmse: Option<f64>,
    pub seconds: [f64; 2],
    pub config_hash: String,
    pub fingerprint: Fingerprint,
    pub reference_full_scale: Vec<(String, f64)>,
}

/// Outflow of the aquifer problem on both coarse models of `n_samples` samples.
pub fn bench_aquifer(cfg: &RunConfig, n_samples: usize, a: &dyn BlockBackend, b: &dyn BlockBackend) -> Result<AquiferReport> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument("the aquifer comparison needs at least two samples".into()));
    }
    let grid = cfg.block_grid()?;
    let samples = (0..n_samples).map(|i| draw_macro_sample(cfg, &grid, i)).collect::<Result<Vec<_>>>()?;
    compare_aquifer(cfg, &samples, a, b)
}

/// Aquifer comparison on given fine-scale samples.
pub fn compare_aquifer(cfg: &RunConfig, samples: &[MacroSample], a: &dyn BlockBackend, b: &dyn BlockBackend) -> Result<AquiferReport> {
    let domain = cfg.original_domain();
    let mut rows = Vec::with_capacity(samples.len());
    let mut seconds = [0.0; 2];
    for (i, s) in samples.iter().enumerate() {
        let explicit = coarse_fractures(cfg, &s.fractures);
        let mut row = AquiferRow { sample: i, y: [0.0; 2], kx: [0.0; 2], projected: [0; 2] };
        for (k, backend) in [a, b].into_iter().enumerate() {
            let t0 = Instant::now();
            let (coarse, projected) = upscaled(cfg, s, backend)?;
            let (y, kx) =
                aquifer_kx(&coarse, &explicit, domain, cfg.blocks.coarse, cfg.blocks.head, &cfg.solver.options)?;
            seconds[k] += t0.elapsed().as_secs_f64();
            row.y[k] = y;
            row.kx[k] = kx;
            row.projected[k] = projected;
        }
        log::info!("aquifer sample {i}: Y = {:e} / {:e}", row.y[0], row.y[1]);
        rows.push(row);
    }
    let ya: Vec<f64> = rows.iter().map(|r| r.y[0]).collect();
    let yb: Vec<f64> = rows.iter().map(|r| r.y[1]).collect();
    let (r2, nrmse) = match r2_nrmse(&yb, &ya) {
        Ok((r2, nrmse)) => (Some(r2), Some(nrmse)),
        Err(Error::ZeroVariance { .. }) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(AquiferReport {
        backends: [a.name().into(), b.name().into()],
        rows,
        r2,
        nrmse,
        seconds,
        config_hash: cfg.hash(),
        fingerprint: fingerprint(),
        reference_full_scale: vec![("ratio_1e3".into(), 1.0), ("ratio_1e5".into(), 0.95), ("ratio_1e7".into(), 0.87)],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnisotropyRow {
    pub sample: usize,
    pub k: [[f64; 3]; 2],
    pub projected: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnisotropyReport {
    pub backends: [String; 2],
    pub rows: Vec<AnisotropyRow>,
    /// Per-component agreement, second backend predicting the first.
    pub metrics: Option<Metrics>,
    pub seconds: [f64; 2],
    pub config_hash: String,
    pub fingerprint: Fingerprint,
    pub reference_full_scale: Vec<(String, f64)>,
}

/// Whole-domain equivalent tensor of both coarse models of `n_samples` samples.
pub fn bench_anisotropy(
    cfg: &RunConfig,
    n_samples: usize,
    a: &dyn BlockBackend,
    b: &dyn BlockBackend,
) -> Result<AnisotropyReport> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument("the anisotropy comparison needs at least two samples".into()));
    }
    let grid = cfg.block_grid()?;
    let samples = (0..n_samples).map(|i| draw_macro_sample(cfg, &grid, i)).collect::<Result<Vec<_>>>()?;
    compare_anisotropy(cfg, &samples, a, b)
}

pub fn compare_anisotropy(
    cfg: &RunConfig,
    samples: &[MacroSample],
    a: &dyn BlockBackend,
    b: &dyn BlockBackend,
) -> Result<AnisotropyReport> {
    let domain = cfg.original_domain();
    let mut rows = Vec::with_capacity(samples.len());
    let mut seconds = [0.0; 2];
    for (i, s) in samples.iter().enumerate() {
        let explicit = coarse_fractures(cfg, &s.fractures);
        let mut row = AnisotropyRow { sample: i, k: [[0.0; 3]; 2], projected: [0; 2] };
        for (k, backend) in [a, b].into_iter().enumerate() {
            let t0 = Instant::now();
            let (coarse, projected) = upscaled(cfg, s, backend)?;
            let eq = anisotropy_tensor(&coarse, &explicit, domain, cfg.blocks.coarse, &cfg.solver.options)?;
            seconds[k] += t0.elapsed().as_secs_f64();
            row.k[k] = eq.k.to_array();
            row.projected[k] = projected;
        }
        rows.push(row);
    }
    let ka: Vec<[f64; 3]> = rows.iter().map(|r| r.k[0]).collect();
    let kb: Vec<[f64; 3]> = rows.iter().map(|r| r.k[1]).collect();
    let metrics = match compute_metrics(&kb, &ka) {
        Ok(m) => Some(m),
        Err(Error::ZeroVariance { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(AnisotropyReport {
        backends: [a.name().into(), b.name().into()],
        rows,
        metrics,
        seconds,
        config_hash: cfg.hash(),
        fingerprint: fingerprint(),
        reference_full_scale: vec![("surrogate_c_component_r2".into(), 0.99998)],
    })
}

/// Median wall-clock time of the two block pathways over one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub blocks: usize,
    pub block_size: f64,
    pub repetitions: usize,
    /// Discretization and solves of every block.
    pub c_h: f64,
    /// Rasterization plus inference of every block.
    pub c_s: f64,
    pub ratio: f64,
    pub rasterization: f64,
    pub inference: f64,
    pub rasterization_share: f64,
    pub config_hash: String,
    pub fingerprint: Fingerprint,
    pub reference_full_scale: Vec<(String, f64)>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Block side giving `blocks` overlapping blocks on the configured domain.
pub fn block_size_for(domain: f64, blocks: usize) -> Result<f64> {
    let per_axis = (blocks as f64).sqrt().round() as usize;
    if per_axis < 2 || per_axis * per_axis != blocks {
        return Err(Error::InvalidArgument(format!("{blocks} is not a square number of at least 4 blocks")));
    }
    Ok(2.0 * domain / (per_axis - 1) as f64)
}

/// Times the numeric block solves against rasterization plus batched
/// inference on one sample with `blocks` blocks, taking the median of
/// `repetitions` runs.  Training time is not included.
pub fn bench_speedup(cfg: &RunConfig, model: &SurrogateModel, blocks: usize, repetitions: usize) -> Result<SpeedupReport> {
    let l = block_size_for(cfg.blocks.domain, blocks)?;
    let grid = BlockGrid::new(cfg.original_domain(), l)?;
    let s = draw_macro_sample(cfg, &grid, 0)?;
    let numeric = NumericBackend { resolution: cfg.solver.resolution, solver: cfg.solver.options };
    let r = model.arch().input_side;
    let reps = repetitions.max(1);
    let (mut th, mut tr, mut ti) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..reps {
        let t0 = Instant::now();
        let num = block_tensors(&s.field, &s.fractures, &grid, &numeric, cfg.blocks.threshold)?;
        std::hint::black_box(&num);
        th.push(t0.elapsed().as_secs_f64());

        let t0 = Instant::now();
        let rasters = (0..grid.len())
            .into_par_iter()
            .map(|id| {
                let block = grid.block(id);
                rasterize_block(&s.field, &select_fractures(&s.fractures, &block, cfg.blocks.threshold), &block, r)
            })
            .collect::<Result<Vec<_>>>()?;
        tr.push(t0.elapsed().as_secs_f64());

        let t0 = Instant::now();
        let pre = rasters.par_iter().map(|x| preprocess(x, &model.stats)).collect::<Result<Vec<_>>>()?;
        let set = TensorSet {
            r,
            inputs: pre.iter().flat_map(|p| p.planes.iter().map(|&v| v as f32)).collect(),
            targets: vec![[0.0; 3]; pre.len()],
            raw_targets: vec![[0.0; 3]; pre.len()],
            xm: pre.iter().map(|p| p.xm).collect(),
        };
        let z = model.predict_standardized(&set)?;
        let tensors: Vec<_> = z.iter().zip(&set.xm).map(|(z, &xm)| crate::dataset::inverse_target(*z, xm, &model.stats)).collect();
        std::hint::black_box(&tensors);
        ti.push(t0.elapsed().as_secs_f64());
    }
    let (c_h, rasterization, inference) = (median(th), median(tr), median(ti));
    let c_s = rasterization + inference;
    Ok(SpeedupReport {
        blocks: grid.len(),
        block_size: grid.block_size,
        repetitions: reps,
        c_h,
        c_s,
        ratio: c_h / c_s,
        rasterization,
        inference,
        rasterization_share: rasterization / c_s,
        config_hash: cfg.hash(),
        fingerprint: fingerprint(),
        reference_full_scale: vec![("blocks_25".into(), 4.0), ("blocks_1369".into(), 28.0)],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Dimensionless fracture density.
    Rho,
    /// Correlation length of the matrix field.
    Lambda,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rho" | "density" => Ok(Self::Rho),
            "lambda" | "correlation_length" => Ok(Self::Lambda),
            _ => Err(Error::InvalidArgument(format!("unknown sweep parameter {s:?} (expected rho or lambda)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub samples: usize,
    pub standardized: Metrics,
    pub raw: Metrics,
}

/// Accuracy of `model` on fresh samples drawn with one parameter changed.
pub fn sweep(cfg: &RunConfig, model: &SurrogateModel, param: SweepParam, values: &[f64], n_samples: usize) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(values.len());
    for (k, &value) in values.iter().enumerate() {
        let mut dc = cfg.dataset_config();
        dc.n_samples = n_samples;
        match param {
            SweepParam::Rho => dc.dfn.density = value,
            SweepParam::Lambda => dc.lambdas = vec![value],
        }
        let samples = build_samples(&dc, substream_seed(cfg.seeds.master, "bench.sweep", k as u64), &cfg.solver.options)?;
        let set = TensorSet::from_samples(&samples, &model.stats)?;
        let eval = model.evaluate(&set)?;
        log::info!("sweep {param:?} = {value}: mean R2 {:.4}", eval.standardized.mean_r2);
        rows.push(SweepRow { param, value, samples: set.len(), standardized: eval.standardized, raw: eval.raw });
    }
    Ok(rows)
}

/// Coarse tensor field of both backends on one sample, for inspection.
pub fn coarse_pair(
    cfg: &RunConfig,
    index: usize,
    a: &dyn BlockBackend,
    b: &dyn BlockBackend,
) -> Result<[TensorField; 2]> {
    let grid = cfg.block_grid()?;
    let s = draw_macro_sample(cfg, &grid, index)?;
    let ta = block_tensors(&s.field, &s.fractures, &grid, a, cfg.blocks.threshold)?;
    let tb = block_tensors(&s.field, &s.fractures, &grid, b, cfg.blocks.threshold)?;
    Ok([interpolate_blocks(&grid, &ta, cfg.blocks.coarse)?.0, interpolate_blocks(&grid, &tb, cfg.blocks.coarse)?.0])
}
