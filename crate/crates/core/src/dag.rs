//! Discriminator-guided patch position sampling and patch gathering.

use candle_core::{Tensor, D};
use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::ScoreMap;
use crate::error::{Error, Result};
use crate::generator::StageFeatureMap;
use crate::ops;

/// Which end of the discriminator score ranking counts as most informative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreOrder {
    /// Lowest realness first (most confidently fake).
    #[default]
    Ascending,
    Descending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DagConfig {
    #[serde(rename = "n_patches", alias = "K")]
    pub n_patches: usize,
    #[serde(rename = "k", alias = "oversampling_ratio")]
    pub oversampling_ratio: usize,
    #[serde(rename = "beta", alias = "importance_ratio")]
    pub importance_ratio: f64,
    pub dedupe: bool,
    pub order: ScoreOrder,
}

impl Default for DagConfig {
    fn default() -> Self {
        Self {
            n_patches: 256,
            oversampling_ratio: 4,
            importance_ratio: 0.5,
            dedupe: true,
            order: ScoreOrder::Ascending,
        }
    }
}

impl DagConfig {
    /// Configuration that reduces to plain uniform sampling.
    pub fn uniform(n_patches: usize) -> Self {
        Self {
            n_patches,
            oversampling_ratio: 1,
            importance_ratio: 0.0,
            ..Default::default()
        }
    }

    pub fn importance_count(&self) -> usize {
        (self.importance_ratio * self.n_patches as f64 + 1e-9).floor() as usize
    }

    pub fn candidate_count(&self) -> usize {
        self.oversampling_ratio * self.n_patches
    }

    /// Whether sampling depends on discriminator scores at all.
    pub fn uses_scores(&self) -> bool {
        self.importance_count() > 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patches == 0 {
            return Err(Error::Config("dag.n_patches must be at least 1".into()));
        }
        if self.oversampling_ratio == 0 {
            return Err(Error::Config("dag.k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.importance_ratio) {
            return Err(Error::Config(format!(
                "dag.beta must lie in [0, 1], got {}",
                self.importance_ratio
            )));
        }
        Ok(())
    }

    /// Checks that a grid of `positions` cells can hold k·K candidates.
    pub fn check_grid(&self, positions: usize) -> Result<()> {
        self.validate()?;
        if self.candidate_count() > positions {
            return Err(Error::Config(format!(
                "k*K = {}*{} = {} candidates exceed the {} positions of the feature map",
                self.oversampling_ratio,
                self.n_patches,
                self.candidate_count(),
                positions
            )));
        }
        Ok(())
    }
}

/// Flat positions chosen on one H×W grid; the first `importance_count`
/// entries are the importance picks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchIndexSet {
    pub indices: Vec<usize>,
    pub importance_count: usize,
    pub source_tap: usize,
    pub grid: (usize, usize),
}

impl PatchIndexSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn importance(&self) -> &[usize] {
        &self.indices[..self.importance_count]
    }

    pub fn covering(&self) -> &[usize] {
        &self.indices[self.importance_count..]
    }
}

/// Dense per-position scores on an H×W grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseScores {
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

impl DenseScores {
    pub fn new(values: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim("dense scores", height * width, values.len()));
        }
        Ok(Self { values, height, width })
    }
}

/// Bilinearly resizes the detached score grid of batch item `item` to `target`.
pub fn upsample_scores(scores: &ScoreMap, item: usize, target: (usize, usize)) -> Result<DenseScores> {
    let (gh, gw) = scores.grid();
    let grid = scores.item_scores(item)?;
    let values = ops::resize_grid(&grid, gh, gw, target.0, target.1);
    DenseScores::new(values, target.0, target.1)
}

/// Draws K positions: oversample k·K candidates without replacement, keep
/// the ⌊βK⌋ best-ranked ones, then cover the remainder uniformly.
pub fn sample(
    scores: &DenseScores,
    cfg: &DagConfig,
    source_tap: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PatchIndexSet> {
    let n = scores.height * scores.width;
    cfg.check_grid(n)?;
    let k_total = cfg.n_patches;
    let m = cfg.importance_count();
    let mut indices = Vec::with_capacity(k_total);
    if m > 0 {
        let mut candidates = index::sample(rng, n, cfg.candidate_count()).into_vec();
        let key = |i: &usize| scores.values[*i];
        match cfg.order {
            ScoreOrder::Ascending => candidates.sort_by(|a, b| key(a).total_cmp(&key(b))),
            ScoreOrder::Descending => candidates.sort_by(|a, b| key(b).total_cmp(&key(a))),
        }
        indices.extend_from_slice(&candidates[..m]);
    }
    let rest = k_total - m;
    if rest > 0 {
        if cfg.dedupe && m > 0 {
            let mut taken = vec![false; n];
            for &i in &indices {
                taken[i] = true;
            }
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            indices.extend(index::sample(rng, free.len(), rest).iter().map(|j| free[j]));
        } else {
            indices.extend(index::sample(rng, n, rest).iter());
        }
    }
    Ok(PatchIndexSet {
        indices,
        importance_count: m,
        source_tap,
        grid: (scores.height, scores.width),
    })
}

/// Uniform sampling of K distinct positions on an H×W grid.
pub fn sample_uniform(
    grid: (usize, usize),
    n_patches: usize,
    source_tap: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PatchIndexSet> {
    let n = grid.0 * grid.1;
    if n_patches > n {
        return Err(Error::Config(format!("{n_patches} patches exceed the {n} grid positions")));
    }
    Ok(PatchIndexSet {
        indices: index::sample(rng, n, n_patches).into_vec(),
        importance_count: 0,
        source_tap,
        grid,
    })
}

/// Gathers the channel vectors at each batch item's positions into a
/// (Σ K_b, C) matrix, item by item in index order.
pub fn gather_patches(feature: &StageFeatureMap, idx: &[PatchIndexSet]) -> Result<Tensor> {
    let (b, c, h, w) = feature.tensor.dims4()?;
    if idx.len() != b {
        return Err(Error::dim("index sets per batch", b, idx.len()));
    }
    let flat = feature.tensor.reshape((b, c, h * w))?;
    let mut rows = Vec::with_capacity(b);
    for (i, set) in idx.iter().enumerate() {
        if set.grid != (h, w) {
            return Err(Error::dim(
                format!("index grid for tap {}", feature.tap_index),
                (h, w),
                set.grid,
            ));
        }
        if let Some(&bad) = set.indices.iter().find(|&&j| j >= h * w) {
            return Err(Error::Usage(format!(
                "patch index {bad} out of range for a {h}x{w} map"
            )));
        }
        let ids: Vec<u32> = set.indices.iter().map(|&j| j as u32).collect();
        let ids = Tensor::from_vec(ids, set.len(), feature.tensor.device())?;
        rows.push(flat.get(i)?.index_select(&ids, D::Minus1)?.t()?);
    }
    Ok(Tensor::cat(&rows, 0)?)
}

/// One line of the sampler history log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerRecord {
    pub iteration: u64,
    pub tap: usize,
    pub grid: (usize, usize),
    pub importance_count: usize,
    pub indices: Vec<usize>,
}
