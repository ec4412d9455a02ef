//! Objective terms: latent similarity with stop-gradient, its multi-stage
//! sum, least-squares adversarial terms and the identity regularizer.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::dag::PatchIndexSet;
use crate::discriminator::ScoreMap;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::heads::{normalize, Branch, Heads, TapPair};

/// Tolerance on ‖v‖ = 1 for inputs of [`similarity_loss`].
pub const UNIT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_nce: f64,
    pub lambda_idt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_nce: 2.0,
            lambda_idt: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_nce >= 0.0 && self.lambda_idt >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got nce={} idt={}",
                self.lambda_nce, self.lambda_idt
            )));
        }
        Ok(())
    }
}

/// Set of encoder/decoder tap pairs the content constraint is applied to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagePairSelection {
    pub pairs: Vec<TapPair>,
    /// Allows pairs that are not mirror images of each other; heads then
    /// align encoder features to the decoder grid and width.
    pub asymmetric: bool,
}

impl Default for StagePairSelection {
    fn default() -> Self {
        Self {
            pairs: vec![TapPair::new(7, 24), TapPair::new(13, 18)],
            asymmetric: false,
        }
    }
}

impl StagePairSelection {
    pub fn validate(&self, generator: &GeneratorConfig) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Config("stages.pairs must name at least one pair".into()));
        }
        let enc = generator.encoder_taps();
        let dec = generator.decoder_taps();
        for p in &self.pairs {
            if !enc.contains(&p.encoder) || !dec.contains(&p.decoder) {
                return Err(Error::Config(format!(
                    "pair {} is not (encoder tap, decoder tap); encoder taps {enc:?}, decoder taps {dec:?}",
                    p.label()
                )));
            }
            if !self.asymmetric && generator.mirror_tap(p.encoder) != p.decoder {
                return Err(Error::Config(format!(
                    "pair {} is not a same-stage pair; set stages.asymmetric to allow it",
                    p.label()
                )));
            }
        }
        let mut seen = self.pairs.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.pairs.len() {
            return Err(Error::Config("stages.pairs contains duplicates".into()));
        }
        Ok(())
    }
}

/// Scalar values of the generator objective's parts.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub gan: f64,
    pub multistage: f64,
    pub identity: f64,
}

/// `gan + λ_nce·multistage + λ_idt·identity`, the identity weight being
/// zero while its schedule is inactive.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, identity_active: bool) -> f64 {
    let idt = if identity_active { weights.lambda_idt } else { 0.0 };
    parts.gan + weights.lambda_nce * parts.multistage + idt * parts.identity
}

/// Tensor form of [`total_loss`]; `identity` is `None` while inactive.
pub fn total_loss_tensor(
    gan: &Tensor,
    multistage: Option<&Tensor>,
    identity: Option<&Tensor>,
    weights: &LossWeights,
) -> Result<Tensor> {
    let mut total = gan.clone();
    if let Some(m) = multistage {
        total = (total + (m * weights.lambda_nce)?)?;
    }
    if let Some(i) = identity {
        total = (total + (i * weights.lambda_idt)?)?;
    }
    Ok(total)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// ‖p − z‖² for unit vectors, i.e. 2 − 2·cos(p, z).
pub fn similarity_loss(p: &[f64], z: &[f64]) -> Result<f64> {
    if p.len() != z.len() {
        return Err(Error::dim("similarity_loss", p.len(), z.len()));
    }
    for (name, v) in [("p", p), ("z", z)] {
        let n = norm(v);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Contract(format!("{name} must be unit length, has norm {n}")));
        }
    }
    Ok(p.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// [`similarity_loss`] after scaling both inputs to unit length.
pub fn similarity_loss_normalized(p: &[f64], z: &[f64]) -> Result<f64> {
    let (np, nz) = (norm(p), norm(z));
    if np < crate::heads::MIN_NORM || nz < crate::heads::MIN_NORM {
        return Err(Error::Numeric("zero-length input to similarity loss".into()));
    }
    let p: Vec<f64> = p.iter().map(|v| v / np).collect();
    let z: Vec<f64> = z.iter().map(|v| v / nz).collect();
    similarity_loss(&p, &z)
}

/// Mean over rows of ‖p̄_i − z̄_i‖² for row-normalized (n, d) tensors.
pub fn patch_similarity(p_bar: &Tensor, z_bar: &Tensor) -> Result<Tensor> {
    if p_bar.dims() != z_bar.dims() {
        return Err(Error::dim("patch similarity", p_bar.dims(), z_bar.dims()));
    }
    Ok((p_bar - z_bar)?.sqr()?.sum(D::Minus1)?.mean_all()?)
}

/// Whether the encoder-branch latents are cut from the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopGrad {
    Enabled,
    Disabled,
}

/// Gathered patches of one tap pair, taken at identical positions.
#[derive(Debug, Clone)]
pub struct PairPatches {
    pub pair: TapPair,
    /// Encoder rows (n, c_enc), before any channel alignment.
    pub encoder: Tensor,
    /// Decoder rows (n, c_dec).
    pub decoder: Tensor,
    pub encoder_positions: Vec<PatchIndexSet>,
    pub decoder_positions: Vec<PatchIndexSet>,
}

/// Output of [`multistage_loss`].
#[derive(Debug, Clone)]
pub struct MultiStage {
    pub total: Tensor,
    pub per_pair: Vec<(TapPair, Tensor)>,
    /// Encoder-branch latents actually used (after stop-gradient).
    pub encoder_latents: Vec<Tensor>,
    /// Root-mean-square spread of normalized decoder predictions around
    /// their centroid, averaged over pairs.
    pub latent_std: f64,
}

/// Sum over tap pairs of the mean per-patch similarity between predicted
/// decoder latents and (stop-gradient) encoder latents.
pub fn multistage_loss(heads: &Heads, pairs: &[PairPatches], stop: StopGrad) -> Result<MultiStage> {
    if pairs.is_empty() {
        return Err(Error::Config("at least one tap pair is required".into()));
    }
    let mut total: Option<Tensor> = None;
    let mut per_pair = Vec::new();
    let mut encoder_latents = Vec::new();
    let mut spread = 0.0;
    for pp in pairs {
        let same = pp.encoder_positions.len() == pp.decoder_positions.len()
            && pp
                .encoder_positions
                .iter()
                .zip(&pp.decoder_positions)
                .all(|(a, b)| a.indices == b.indices);
        if !same || pp.encoder.dims()[0] != pp.decoder.dims()[0] {
            return Err(Error::Contract(format!(
                "encoder and decoder patches of {} come from different positions",
                pp.pair.label()
            )));
        }
        let width = pp.decoder.dims2()?.1;
        let k = heads.align_patches(pp.pair, &pp.encoder)?;
        let z = heads.project(&k, Branch::Encoder)?;
        let z = match stop {
            StopGrad::Enabled => z.detach(),
            StopGrad::Disabled => z,
        };
        let z_bar = normalize(&z)?;
        let q = heads.project(&pp.decoder, Branch::Decoder)?;
        let p_bar = normalize(&heads.predict(&q, width)?)?;
        let loss = patch_similarity(&p_bar.vectors, &z_bar.vectors)?;
        spread += latent_spread(&p_bar.vectors)?;
        encoder_latents.push(z.vectors.clone());
        total = Some(match total {
            None => loss.clone(),
            Some(t) => (t + &loss)?,
        });
        per_pair.push((pp.pair, loss));
    }
    Ok(MultiStage {
        total: total.expect("non-empty pairs"),
        per_pair,
        encoder_latents,
        latent_std: spread / pairs.len() as f64,
    })
}

/// sqrt(mean_i ‖x_i − x̄‖²) over the rows of an (n, d) tensor.
pub fn latent_spread(x: &Tensor) -> Result<f64> {
    let x = x.detach().to_dtype(DType::F64)?;
    let n = x.dims()[0];
    if n == 0 {
        return Ok(0.0);
    }
    let centered = x.broadcast_sub(&x.mean_keepdim(0)?)?;
    let msd = centered.sqr()?.sum(D::Minus1)?.mean_all()?.to_scalar::<f64>()?;
    Ok(msd.max(0.0).sqrt())
}

fn mean_sq_from(x: &Tensor, target: f64) -> Result<Tensor> {
    Ok((x - target)?.sqr()?.mean_all()?)
}

/// Least-squares discriminator loss: real cells toward 1, fake toward 0.
pub fn gan_loss_d(real: &ScoreMap, fake: &ScoreMap) -> Result<Tensor> {
    Ok((mean_sq_from(&real.tensor, 1.0)? + mean_sq_from(&fake.tensor, 0.0)?)?)
}

/// Least-squares generator loss: fake cells toward 1.
pub fn gan_loss_g(fake: &ScoreMap) -> Result<Tensor> {
    mean_sq_from(&fake.tensor, 1.0)
}

/// Mean absolute difference between G(y) and y.
pub fn identity_loss(g_of_y: &Tensor, y: &Tensor) -> Result<Tensor> {
    if g_of_y.dims() != y.dims() {
        return Err(Error::dim("identity loss", y.dims(), g_of_y.dims()));
    }
    Ok((g_of_y - y)?.abs()?.mean_all()?)
}
