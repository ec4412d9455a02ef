//! PatchGAN discriminator with anti-aliased downsampling.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Grad, Init, InitScheme, ParamStore};
use crate::ops::{self, Padding};

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub input_channels: usize,
    pub base_width: usize,
    /// Number of conv + downsample blocks.
    pub n_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            base_width: 64,
            n_layers: 3,
        }
    }
}

impl DiscriminatorConfig {
    fn widths(&self) -> Vec<usize> {
        (0..self.n_layers)
            .map(|i| self.base_width * (1usize << i.min(3)))
            .collect()
    }

    /// Score-grid side length for an input side length, if non-empty.
    pub fn grid_size(&self, input: usize) -> Option<usize> {
        let mut s = input;
        for _ in 0..self.n_layers {
            s = ops::conv_out_size(s, 4, 1, 1)?;
            s = ops::blur_out_size(s);
        }
        // penultimate and final conv
        s = ops::conv_out_size(s, 4, 1, 1)?;
        let s = ops::conv_out_size(s, 4, 1, 1)?;
        (s >= 1).then_some(s)
    }

    /// Smallest input side that yields a non-empty score grid.
    pub fn min_input_size(&self) -> usize {
        (1..).find(|&s| self.grid_size(s).is_some()).unwrap_or(usize::MAX)
    }

    /// Receptive field of one score cell, in input pixels.
    pub fn receptive_field(&self) -> usize {
        // walk back from the output: k4/s1 twice, then (k4/s1, k3/s2) per block
        let mut r = 4 + 3;
        for _ in 0..self.n_layers {
            r = (r - 1) * 2 + 3;
            r += 3;
        }
        r
    }

    /// Product of the downsampling strides.
    pub fn total_stride(&self) -> usize {
        1 << self.n_layers
    }
}

/// Discriminator realness grid for a batch of images.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub tensor: Tensor,
    pub source_image_size: (usize, usize),
}

impl ScoreMap {
    pub fn grid(&self) -> (usize, usize) {
        let d = self.tensor.dims();
        (d[2], d[3])
    }

    /// Row-major scores of batch item `i`, detached from the graph.
    pub fn item_scores(&self, i: usize) -> Result<Vec<f32>> {
        Ok(self
            .tensor
            .detach()
            .get(i)?
            .flatten_all()?
            .to_dtype(candle_core::DType::F32)?
            .to_vec1::<f32>()?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv2d,
    norm: bool,
    downsample: bool,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    blocks: Vec<Block>,
    output: Conv2d,
    params: ParamStore,
}

impl Discriminator {
    pub fn new(
        config: &DiscriminatorConfig,
        scheme: InitScheme,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.n_layers == 0 || config.base_width == 0 {
            return Err(Error::Config("discriminator needs n_layers >= 1 and base_width >= 1".into()));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, rng, "discriminator", scheme);
        let mut blocks = Vec::new();
        let mut in_c = config.input_channels;
        for (i, &w) in config.widths().iter().enumerate() {
            blocks.push(Block {
                conv: init.conv(&format!("block{i}.conv"), in_c, w, 4, 1, 1, Padding::Zeros)?,
                norm: i > 0,
                downsample: true,
            });
            in_c = w;
        }
        blocks.push(Block {
            conv: init.conv(&format!("block{}.conv", config.n_layers), in_c, in_c, 4, 1, 1, Padding::Zeros)?,
            norm: true,
            downsample: false,
        });
        let output = init.conv("output.conv", in_c, 1, 4, 1, 1, Padding::Zeros)?;
        Ok(Self {
            config: config.clone(),
            blocks,
            output,
            params,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Raw (unbounded) realness scores. With [`Grad::Frozen`] the
    /// parameters are treated as constants, so only the input receives
    /// gradient.
    pub fn score_map(&self, image: &Tensor, grad: Grad) -> Result<ScoreMap> {
        let (_, c, h, w) = image.dims4()?;
        if c != self.config.input_channels {
            return Err(Error::dim("discriminator input channels", self.config.input_channels, c));
        }
        let min = self.config.min_input_size();
        if h < min || w < min {
            return Err(Error::dim(
                "discriminator input",
                format!("spatial size >= {min}"),
                (h, w),
            ));
        }
        let mut x = image.clone();
        for b in &self.blocks {
            x = b.conv.forward(&x, grad)?;
            if b.norm {
                x = ops::instance_norm(&x)?;
            }
            x = ops::leaky_relu(&x, SLOPE)?;
            if b.downsample {
                x = ops::blur_downsample(&x)?;
            }
        }
        let tensor = self.output.forward(&x, grad)?;
        Ok(ScoreMap {
            tensor,
            source_image_size: (h, w),
        })
    }
}
