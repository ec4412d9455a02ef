//! FID with pluggable feature extractors, plus the diagnostic plots.

pub mod edges;
pub mod embedder;
pub mod fid;
pub mod inception;
pub mod plots;

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data;
use crate::error::{Error, Result};

pub use edges::{edge_l1, edge_maps};
pub use embedder::{extract_features, Extractor, RandomEmbedder};
pub use fid::{fid, fid_from_features, sqrtm_psd, FeatureStats};
pub use inception::InceptionV3;
pub use plots::{histogram, read_sampler_log, sampling_frequency_map, weight_density, Density, FrequencyMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Built-in fixed-seed random convolutional embedder.
    #[default]
    Embedder,
    /// InceptionV3 pool3 features; needs `eval.inception_weights`.
    Inception,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub extractor: ExtractorKind,
    pub inception_weights: Option<PathBuf>,
    pub embedder_seed: u64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorKind::Embedder,
            inception_weights: None,
            embedder_seed: 0,
            batch_size: 16,
        }
    }
}

pub fn make_extractor(cfg: &EvalConfig) -> Result<Box<dyn Extractor>> {
    match cfg.extractor {
        ExtractorKind::Embedder => Ok(Box::new(RandomEmbedder::new(cfg.embedder_seed)?)),
        ExtractorKind::Inception => {
            let path = cfg.inception_weights.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "eval.inception_weights must point to {}",
                    inception::WEIGHTS_ARTIFACT
                ))
            })?;
            Ok(Box::new(InceptionV3::load(path)?))
        }
    }
}

/// FID between two image batches in [-1, 1].
pub fn fid_images(a: &Tensor, b: &Tensor, extractor: &dyn Extractor, chunk: usize) -> Result<f64> {
    fid_from_features(
        &extract_features(a, extractor, chunk)?,
        &extract_features(b, extractor, chunk)?,
    )
}

/// FID between two image folders, each resized to `size`.
pub fn fid_dirs(real: &Path, fake: &Path, size: usize, cfg: &EvalConfig) -> Result<f64> {
    let extractor = make_extractor(cfg)?;
    let (_, a) = data::load_dir(real, size)?;
    let (_, b) = data::load_dir(fake, size)?;
    fid_images(&a, &b, extractor.as_ref(), cfg.batch_size)
}
