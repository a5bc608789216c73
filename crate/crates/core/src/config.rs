//! Versioned run configuration shared by every pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{sha256_hex, DatasetConfig, RatioClass};
use crate::dfm_solver::SolverOptions;
use crate::error::{Error, Result};
use crate::frac_geom::DfnSpec;
use crate::geometry::Rect;
use crate::homogenizer::BlockGrid;
use crate::random_field::SrfParams;
use crate::rng::substream_seed;
use crate::surrogate::{Architecture, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrfSection {
    pub correlation_length: f64,
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    /// Cells per axis when a field is generated on its own.
    pub grid: usize,
}

impl Default for SrfSection {
    fn default() -> Self {
        let p = SrfParams::default();
        Self { correlation_length: 10.0, mean: p.mean, cov: p.cov, grid: 256 }
    }
}

impl SrfSection {
    pub fn params(&self) -> SrfParams {
        SrfParams { correlation_length: self.correlation_length, mean: self.mean, cov: self.cov }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    /// Cells per axis of a block solve.
    pub resolution: usize,
    pub options: SolverOptions,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { resolution: 32, options: SolverOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlocksSection {
    /// Side `L` of the original square domain.
    pub domain: f64,
    /// Block side `l`, snapped so that `2L/l` is an integer.
    pub block: f64,
    /// Only fractures shorter than this are homogenized; `None` keeps all.
    pub threshold: Option<f64>,
    /// Cells per axis of the coarse field and of the macroscale solves.
    pub coarse: usize,
    /// Head difference of the aquifer problem.
    pub head: f64,
}

impl Default for BlocksSection {
    fn default() -> Self {
        Self { domain: 100.0, block: 100.0 / 7.0, threshold: None, coarse: 64, head: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RasterSection {
    pub size: usize,
}

impl Default for RasterSection {
    fn default() -> Self {
        Self { size: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub ratio_class: RatioClass,
    pub n_samples: usize,
    pub lambdas: Vec<f64>,
    pub max_skip_fraction: f64,
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            ratio_class: d.ratio_class,
            n_samples: d.n_samples,
            lambdas: d.lambdas,
            max_skip_fraction: d.max_skip_fraction,
            test_fraction: d.test_fraction,
            val_fraction: d.val_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub lr_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub channels: Vec<usize>,
    pub dense: Vec<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            epochs: 50,
            batch_size: t.batch_size,
            patience: t.patience,
            lr_factor: t.lr_factor,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            channels: vec![8, 16, 16, 32],
            dense: vec![64, 64, 32],
        }
    }
}

impl TrainSection {
    pub fn schedule(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            lr_factor: self.lr_factor,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub master: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        Self { master: 20240601 }
    }
}

/// One file per run; every default is written out in the resolved copy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub dfn: DfnSpec,
    pub srf: SrfSection,
    pub solver: SolverSection,
    pub blocks: BlocksSection,
    pub raster: RasterSection,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub seeds: SeedSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            dfn: DfnSpec::default(),
            srf: SrfSection::default(),
            solver: SolverSection::default(),
            blocks: BlocksSection::default(),
            raster: RasterSection::default(),
            dataset: DatasetSection::default(),
            train: TrainSection::default(),
            seeds: SeedSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let invalid = |e: Error| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(m),
            other => Error::InvalidConfig(other.to_string()),
        };
        self.dfn.power_law.validate().map_err(invalid)?;
        if !(self.dfn.density > 0.0) || !(self.dfn.aperture_coeff > 0.0) {
            return Err(Error::InvalidConfig("dfn: density and aperture coefficient must be positive".into()));
        }
        crate::random_field::cholesky2(self.srf.cov).map_err(invalid)?;
        if self.srf.grid < 2 || self.solver.resolution < 2 || self.blocks.coarse < 2 {
            return Err(Error::InvalidConfig("grid sizes must be at least 2".into()));
        }
        if !(self.blocks.head > 0.0) {
            return Err(Error::InvalidConfig("blocks: head must be positive".into()));
        }
        self.block_grid().map_err(invalid)?;
        self.dataset_config().validate()?;
        self.architecture().map_err(invalid)?;
        self.train.schedule().validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Seed of a named pipeline stage derived from the master seed.
    pub fn seed(&self, stage: &str) -> u64 {
        substream_seed(self.seeds.master, stage, 0)
    }

    pub fn original_domain(&self) -> Rect {
        Rect::new(0.0, 0.0, self.blocks.domain, self.blocks.domain)
    }

    pub fn block_grid(&self) -> Result<BlockGrid> {
        BlockGrid::new(self.original_domain(), self.blocks.block)
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let block_size = self.block_grid().map(|g| g.block_size).unwrap_or(self.blocks.block);
        DatasetConfig {
            ratio_class: self.dataset.ratio_class,
            n_samples: self.dataset.n_samples,
            lambdas: self.dataset.lambdas.clone(),
            block_size,
            raster: self.raster.size,
            solver_resolution: self.solver.resolution,
            dfn: self.dfn.clone(),
            srf: self.srf.params(),
            max_skip_fraction: self.dataset.max_skip_fraction,
            test_fraction: self.dataset.test_fraction,
            val_fraction: self.dataset.val_fraction,
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(self.raster.size, &self.train.channels, &self.train.dense)
    }
}
