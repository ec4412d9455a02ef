//! Feature extractors for FID.

use candle_core::{DType, Device, Tensor, D};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{self, Padding};

/// Maps a (n, 3, h, w) batch in [-1, 1] to one feature row per image.
pub trait Extractor {
    fn dim(&self) -> usize;
    fn features(&self, images: &Tensor) -> Result<Tensor>;
}

/// Runs an extractor over `images` in chunks and collects f64 rows.
pub fn extract_features(images: &Tensor, extractor: &dyn Extractor, chunk: usize) -> Result<DMatrix<f64>> {
    let n = images.dims4()?.0;
    let d = extractor.dim();
    let mut rows = Vec::with_capacity(n * d);
    let chunk = chunk.max(1);
    let mut i = 0;
    while i < n {
        let len = chunk.min(n - i);
        let f = extractor.features(&images.narrow(0, i, len)?)?;
        if f.dims() != [len, d] {
            return Err(Error::dim("extracted features", (len, d), f.dims()));
        }
        rows.extend(f.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
        i += len;
    }
    Ok(DMatrix::from_row_slice(n, d, &rows))
}

/// Fixed-seed random convolutional embedder: three stride-2 3×3 conv +
/// ReLU layers on a 64×64 resize; features are the per-channel spatial
/// means of every layer, concatenated.
#[derive(Debug, Clone)]
pub struct RandomEmbedder {
    layers: Vec<(Tensor, Tensor)>,
    input_size: usize,
}

pub const EMBEDDER_WIDTHS: [usize; 3] = [16, 32, 64];

impl RandomEmbedder {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut in_c = 3;
        for &out_c in &EMBEDDER_WIDTHS {
            let fan_in = (in_c * 9) as f32;
            let dist = Normal::new(0.0f32, (2.0 / fan_in).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            let w: Vec<f32> = (0..out_c * in_c * 9).map(|_| dist.sample(&mut rng)).collect();
            let b: Vec<f32> = (0..out_c).map(|_| dist.sample(&mut rng) * 0.1).collect();
            layers.push((
                Tensor::from_vec(w, (out_c, in_c, 3, 3), &Device::Cpu)?,
                Tensor::from_vec(b, out_c, &Device::Cpu)?,
            ));
            in_c = out_c;
        }
        Ok(Self { layers, input_size: 64 })
    }
}

impl Extractor for RandomEmbedder {
    fn dim(&self) -> usize {
        EMBEDDER_WIDTHS.iter().sum()
    }

    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::dim("embedder input channels", 3, c));
        }
        let mut x = images.to_dtype(DType::F32)?.detach();
        if h != self.input_size || w != self.input_size {
            x = ops::resize_bilinear(&x, self.input_size, self.input_size)?;
        }
        let mut feats = Vec::new();
        for (wt, b) in &self.layers {
            x = ops::conv2d(&x, wt, Some(b), 1, 2, Padding::Zeros)?.relu()?;
            feats.push(x.flatten_from(2)?.mean(D::Minus1)?);
        }
        Ok(Tensor::cat(&feats, 1)?)
    }
}
