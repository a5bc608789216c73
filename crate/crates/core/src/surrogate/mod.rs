//! Convolutional regressor mapping a rasterized block to its equivalent
//! tensor, with hand-written reverse-mode gradients and Adam training.
//!
//! Parameters are stored in `T` while every reduction (batch-norm moments,
//! losses, weight gradients) accumulates in `f64`.

mod arch;
mod network;
mod train;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use arch::{max_stages, min_input_side, Architecture, DEFAULT_CHANNELS, DEFAULT_DENSE};
pub use network::{
    gradient_check, mse_loss, ConvStage, DenseCache, DenseLayer, ForwardCache, Gradients, LayerTrace, Network, StageCache,
    TensorCheck,
};
pub use train::{read_history, write_history, Adam, EpochRecord, PlateauScheduler, TrainConfig, TrainReport};

use crate::dataset::{inverse_target, preprocess, sha256_hex, Preprocessed, PreprocessStats, TensorSet};
use crate::error::{Error, Result};
use crate::frac_geom::Fracture;
use crate::geometry::Rect;
use crate::homogenizer::{BlockBackend, EquivalentTensor};
use crate::metrics::{compute_metrics, Metrics};
use crate::random_field::TensorField;
use crate::rasterizer::{rasterize_block, RasterSample};
use crate::scalar::Real;
use crate::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const INFERENCE_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingState {
    pub epoch: usize,
    pub lr: Option<f64>,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
}

/// Network plus the preprocessing statistics it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct Surrogate<T> {
    pub network: Network<T>,
    pub stats: PreprocessStats,
    pub stats_hash: String,
    pub state: TrainingState,
}

/// Raster handed to [`Surrogate::predict_tensor`].
#[derive(Clone, Copy, Debug)]
pub enum RasterInput<'a> {
    Raw(&'a RasterSample),
    Preprocessed(&'a Preprocessed),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean squared error in the standardized space used for training.
    pub loss: f64,
    pub standardized: Metrics,
    pub raw: Metrics,
    pub predictions: Vec<[f64; 3]>,
}

impl<T: Real> Surrogate<T> {
    pub fn new(arch: &Architecture, stats: PreprocessStats, seed: u64) -> Result<Self> {
        Ok(Self {
            network: Network::new(arch, seed)?,
            stats_hash: stats.hash(),
            stats,
            state: TrainingState { epoch: 0, lr: None, best_epoch: 0, best_val_loss: None },
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.network.arch
    }

    fn check_stats(&self, stats: &PreprocessStats) -> Result<()> {
        let actual = stats.hash();
        if actual != self.stats_hash {
            return Err(Error::StatsMismatch { expected: self.stats_hash.clone(), actual });
        }
        Ok(())
    }

    /// Equivalent tensor of one block.  Raw rasters are preprocessed with
    /// `stats` first; the prediction is mapped back to physical units with the
    /// raster's own matrix mean.
    pub fn predict_tensor(&self, input: RasterInput<'_>, stats: &PreprocessStats) -> Result<EquivalentTensor> {
        self.check_stats(stats)?;
        let owned;
        let p = match input {
            RasterInput::Raw(sample) => {
                owned = preprocess(sample, stats)?;
                &owned
            }
            RasterInput::Preprocessed(p) => p,
        };
        let x: Vec<T> = p.planes.iter().map(|&v| T::lit(v)).collect();
        let out = self.network.forward(&x, 1)?;
        let z = [out[0].as_f64(), out[1].as_f64(), out[2].as_f64()];
        let [kxx, kxy, kyy] = inverse_target(z, p.xm, stats);
        let k = Tensor::new(kxx, kxy, kyy);
        Ok(EquivalentTensor { k, positive_definite: k.is_spd(), block: None, residual: 0.0 })
    }

    /// Standardized predictions for every sample of `set`, in order.
    pub fn predict_standardized(&self, set: &TensorSet) -> Result<Vec<[f64; 3]>> {
        let idx: Vec<usize> = (0..set.len()).collect();
        let chunks: Vec<Vec<[f64; 3]>> = idx
            .par_chunks(INFERENCE_BATCH)
            .map(|chunk| {
                let x = train::inputs_as::<T>(set, chunk);
                let out = self.network.forward(&x, chunk.len())?;
                Ok(out.chunks(3).map(|o| [o[0].as_f64(), o[1].as_f64(), o[2].as_f64()]).collect())
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Metrics in the standardized training space and in physical units.
    pub fn evaluate(&self, set: &TensorSet) -> Result<Evaluation> {
        if set.is_empty() {
            return Err(Error::EmptySplit("evaluation"));
        }
        let pred = self.predict_standardized(set)?;
        let standardized = compute_metrics(&pred, &set.targets)?;
        let raw_pred: Vec<[f64; 3]> = pred.iter().zip(&set.xm).map(|(z, &xm)| inverse_target(*z, xm, &self.stats)).collect();
        let raw = compute_metrics(&raw_pred, &set.raw_targets)?;
        Ok(Evaluation { loss: standardized.mse, standardized, raw, predictions: pred })
    }

    /// Writes `model.json` and `weights.bin` (little-endian `f32`) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        let names = self.network.param_names();
        let shapes = self.network.param_shapes();
        let mut push = |name: String, shape: Vec<usize>, data: &[T], blob: &mut Vec<u8>| {
            tensors.push(TensorEntry { name, shape, offset: blob.len() / 4, len: data.len() });
            for v in data {
                blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        };
        for ((name, shape), data) in names.into_iter().zip(shapes).zip(self.network.params()) {
            push(name, shape, data, &mut blob);
        }
        for (name, data) in self.network.buffers() {
            push(name, vec![data.len()], data, &mut blob);
        }
        let manifest = ModelManifest {
            version: CHECKPOINT_VERSION,
            architecture: self.network.arch.clone(),
            dtype: "f32le".into(),
            tensors,
            weights_sha256: sha256_hex(&blob),
            stats: self.stats.clone(),
            stats_hash: self.stats_hash.clone(),
            state: self.state.clone(),
        };
        fs::write(dir.join("weights.bin"), &blob)?;
        crate::dataset::write_json(&dir.join("model.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("model.json");
        let manifest: ModelManifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
        let corrupt = |message: String| Error::Corrupt { path: mpath.clone(), message };
        if manifest.version != CHECKPOINT_VERSION || manifest.dtype != "f32le" {
            return Err(corrupt(format!("unsupported checkpoint version {} / dtype {}", manifest.version, manifest.dtype)));
        }
        if manifest.stats.hash() != manifest.stats_hash {
            return Err(corrupt("stats hash does not match the stored statistics".into()));
        }
        let blob = fs::read(dir.join("weights.bin"))?;
        if sha256_hex(&blob) != manifest.weights_sha256 {
            return Err(corrupt("weights.bin checksum mismatch".into()));
        }
        let mut net = Network::<T>::new(&manifest.architecture, 0)?;
        let mut names = net.param_names();
        names.extend(net.buffers().into_iter().map(|(n, _)| n));
        if manifest.tensors.len() != names.len() {
            return Err(corrupt(format!("expected {} tensors, found {}", names.len(), manifest.tensors.len())));
        }
        let n_params = net.params().len();
        let fill = |dst: &mut [T], entry: &TensorEntry, name: &str| -> Result<()> {
            if entry.name != name || entry.len != dst.len() || entry.shape.iter().product::<usize>() != entry.len {
                return Err(corrupt(format!("tensor {} does not match the architecture", entry.name)));
            }
            let bytes = blob
                .get(4 * entry.offset..4 * (entry.offset + entry.len))
                .ok_or_else(|| corrupt(format!("tensor {} exceeds weights.bin", entry.name)))?;
            for (d, b) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
                *d = T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
            }
            Ok(())
        };
        for (k, dst) in net.params_mut().into_iter().enumerate() {
            fill(dst, &manifest.tensors[k], &names[k])?;
        }
        for (k, dst) in net.buffers_mut().into_iter().enumerate() {
            fill(dst, &manifest.tensors[n_params + k], &names[n_params + k])?;
        }
        Ok(Self { network: net, stats: manifest.stats, stats_hash: manifest.stats_hash, state: manifest.state })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    version: u32,
    architecture: Architecture,
    dtype: String,
    tensors: Vec<TensorEntry>,
    weights_sha256: String,
    stats: PreprocessStats,
    stats_hash: String,
    state: TrainingState,
}

/// Block backend that rasterizes each block and runs the surrogate.
#[derive(Clone, Debug)]
pub struct SurrogateBackend {
    pub model: Surrogate<f32>,
}

impl BlockBackend for SurrogateBackend {
    fn name(&self) -> &str {
        "surrogate"
    }

    fn block_tensor(&self, field: &TensorField, fractures: &[Fracture], block: Rect) -> Result<EquivalentTensor> {
        let raster = rasterize_block(field, fractures, &block, self.model.arch().input_side)?;
        self.model.predict_tensor(RasterInput::Raw(&raster), &self.model.stats)
    }
}
