use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer layout of the convolutional regressor.
///
/// Every convolutional stage is a valid 3×3 convolution with stride 1,
/// batch normalization, ReLU and a 2×2 max-pool with stride 2, so a stage
/// maps side `s` to `(s - 2) / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_side: usize,
    pub input_channels: usize,
    pub channels: Vec<usize>,
    pub dense: Vec<usize>,
    pub outputs: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

pub const DEFAULT_CHANNELS: [usize; 5] = [24, 48, 96, 192, 256];
pub const DEFAULT_DENSE: [usize; 3] = [2048, 2048, 1024];

impl Architecture {
    pub fn new(input_side: usize, channels: &[usize], dense: &[usize]) -> Result<Self> {
        let arch = Self {
            input_side,
            input_channels: crate::rasterizer::CHANNELS,
            channels: channels.to_vec(),
            dense: dense.to_vec(),
            outputs: 3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Full-size layout for an `input_side`² raster.
    pub fn full(input_side: usize) -> Result<Self> {
        Self::new(input_side, &DEFAULT_CHANNELS, &DEFAULT_DENSE)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.outputs == 0 {
            return Err(Error::InvalidArgument("input channels and outputs must be positive".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::InvalidArgument("at least one convolutional stage is required".into()));
        }
        if let Some(i) = self.channels.iter().position(|&c| c == 0) {
            return Err(Error::Shape { layer: stage_name(i), message: "zero output channels".into() });
        }
        if let Some(i) = self.dense.iter().position(|&c| c == 0) {
            return Err(Error::Shape { layer: dense_name(i), message: "zero width".into() });
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::InvalidArgument("batch-norm eps must be positive and momentum in (0, 1]".into()));
        }
        let mut side = self.input_side;
        for i in 0..self.channels.len() {
            if side < 4 {
                return Err(Error::Shape {
                    layer: stage_name(i),
                    message: format!(
                        "input side {side} leaves nothing after a valid 3x3 convolution and 2x2 pooling; \
                         {} stages need an input side of at least {}",
                        self.channels.len(),
                        min_input_side(self.channels.len())
                    ),
                });
            }
            side = (side - 2) / 2;
        }
        Ok(())
    }

    /// Output side of every convolutional stage.
    pub fn stage_sides(&self) -> Vec<usize> {
        let mut side = self.input_side;
        self.channels
            .iter()
            .map(|_| {
                side = side.saturating_sub(2) / 2;
                side
            })
            .collect()
    }

    /// Input side of stage `i`.
    pub fn stage_input_side(&self, i: usize) -> usize {
        if i == 0 {
            self.input_side
        } else {
            self.stage_sides()[i - 1]
        }
    }

    pub fn stage_input_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.input_channels
        } else {
            self.channels[i - 1]
        }
    }

    pub fn flatten_len(&self) -> usize {
        let side = *self.stage_sides().last().unwrap_or(&0);
        side * side * self.channels.last().copied().unwrap_or(0)
    }

    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_side * self.input_side
    }

    /// Widths of the fully connected layers including the output layer.
    pub fn dense_widths(&self) -> Vec<usize> {
        let mut w = self.dense.clone();
        w.push(self.outputs);
        w
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        for i in 0..self.channels.len() {
            n += self.channels[i] * self.stage_input_channels(i) * 9 + 2 * self.channels[i];
        }
        let mut fan_in = self.flatten_len();
        for w in self.dense_widths() {
            n += w * fan_in + w;
            fan_in = w;
        }
        n
    }
}

/// Number of stages that fit into an input of the given side.
pub fn max_stages(side: usize) -> usize {
    let mut s = side;
    let mut n = 0;
    while s >= 4 {
        s = (s - 2) / 2;
        n += 1;
    }
    n
}

/// Smallest input side that supports `stages` convolutional stages.
pub fn min_input_side(stages: usize) -> usize {
    (0..stages).fold(1, |s, _| 2 * s + 2)
}

pub(crate) fn stage_name(i: usize) -> String {
    format!("conv{}", i + 1)
}

pub(crate) fn dense_name(i: usize) -> String {
    format!("dense{}", i + 1)
}
