use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use super::Surrogate;
use crate::dataset::TensorSet;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub lr_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.0025, epochs: 125, batch_size: 64, patience: 10, lr_factor: 0.1, beta1: 0.9, beta2: 0.999, adam_eps: 1e-8 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("train: lr, epochs and batch_size must be positive".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::InvalidConfig("train: lr_factor must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("train: Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction; moments kept in the parameter precision.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(net: &Network<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<T>> = net.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self { beta1, beta2, eps, steps: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (((p, g), m), v) in net.params_mut().into_iter().zip(&grads.tensors).zip(&mut self.m).zip(&mut self.v) {
            for k in 0..p.len() {
                let mk = self.beta1 * m[k].as_f64() + (1.0 - self.beta1) * g[k];
                let vk = self.beta2 * v[k].as_f64() + (1.0 - self.beta2) * g[k] * g[k];
                m[k] = T::lit(mk);
                v[k] = T::lit(vk);
                let update = lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                p[k] = T::lit(p[k].as_f64() - update);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` once the validation loss has not
/// improved for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self { lr, factor, patience, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Records one validation loss and returns the learning rate for the next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

pub fn write_history<W: Write>(history: &[EpochRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in history {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_history<R: std::io::Read>(r: R) -> Result<Vec<EpochRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub(crate) fn inputs_as<T: Real>(set: &TensorSet, indices: &[usize]) -> Vec<T> {
    let mut x = Vec::with_capacity(indices.len() * set.input(0).len());
    for &i in indices {
        x.extend(set.input(i).iter().map(|&v| T::lit(v as f64)));
    }
    x
}

impl<T: Real> Surrogate<T> {
    /// Trains on `train`, tracking the loss on `val` after every epoch, and
    /// leaves the parameters of the epoch with the lowest validation loss in
    /// place.  Batches are drawn from a per-epoch shuffle seeded by `seed`.
    pub fn train(
        &mut self,
        train: &TensorSet,
        val: &TensorSet,
        cfg: &TrainConfig,
        seed: u64,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainReport> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::EmptySplit("train"));
        }
        if val.is_empty() {
            return Err(Error::EmptySplit("val"));
        }
        for set in [train, val] {
            if set.r != self.network.arch.input_side {
                return Err(Error::Shape {
                    layer: "input".into(),
                    message: format!("dataset raster {} does not match input side {}", set.r, self.network.arch.input_side),
                });
            }
        }
        let mut adam = Adam::new(&self.network, cfg.beta1, cfg.beta2, cfg.adam_eps);
        let mut sched = PlateauScheduler::new(cfg.lr, cfg.lr_factor, cfg.patience);
        let mut best = (self.network.clone(), f64::INFINITY, 0usize);
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut batch_id = 0usize;
        for epoch in 1..=cfg.epochs {
            let lr = sched.lr;
            order.sort_unstable();
            order.shuffle(&mut substream(seed, "surrogate.shuffle", epoch as u64));
            let mut sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let x = inputs_as::<T>(train, chunk);
                let targets: Vec<f64> = chunk.iter().flat_map(|&i| train.targets[i]).collect();
                let (loss, grads, cache) = self.network.loss_and_gradients(&x, &targets, chunk.len())?;
                if !loss.is_finite() {
                    return Err(Error::NanLoss { batch: batch_id });
                }
                self.network.update_running(&cache);
                adam.step(&mut self.network, &grads, lr);
                sum += loss * chunk.len() as f64;
                batch_id += 1;
            }
            let val_loss = self.loss(val)?;
            if !val_loss.is_finite() {
                return Err(Error::NanLoss { batch: batch_id });
            }
            let rec = EpochRecord { epoch, train_loss: sum / train.len() as f64, val_loss, lr };
            log::info!("epoch {epoch}: train {:.6e} val {:.6e} lr {lr:e}", rec.train_loss, val_loss);
            on_epoch(&rec);
            history.push(rec);
            if val_loss < best.1 {
                best = (self.network.clone(), val_loss, epoch);
            }
            sched.step(val_loss);
            self.state.epoch = epoch;
            self.state.lr = Some(sched.lr);
        }
        self.network = best.0;
        self.state.best_val_loss = Some(best.1);
        self.state.best_epoch = best.2;
        Ok(TrainReport { history, best_epoch: best.2, best_val_loss: best.1 })
    }

    /// Mean squared error of inference-mode predictions over `set`.
    pub fn loss(&self, set: &TensorSet) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::EmptySplit("evaluation"));
        }
        let pred = self.predict_standardized(set)?;
        let total: f64 = pred
            .iter()
            .zip(&set.targets)
            .map(|(p, t)| (0..3).map(|c| (p[c] - t[c]).powi(2)).sum::<f64>())
            .sum();
        Ok(total / set.len() as f64)
    }
}
