//! Projection and prediction MLPs that map patch features into the latent
//! space where encoder and decoder patches are compared.
//!
//! One projection is instantiated per input channel width and shared by
//! the encoder and decoder side of every pair with that width; each
//! projection has its own prediction head. In asymmetric-pair mode an extra
//! linear map per pair brings the encoder channels to the decoder width
//! after the encoder map is bilinearly resized to the decoder grid.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::StageFeatureMap;
use crate::nn::{Init, InitScheme, LayerNorm, Linear, ParamStore};
use crate::ops;

/// Rows with a norm below this are treated as degenerate.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub latent_dim: usize,
    pub layers: usize,
    pub layer_norm: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            latent_dim: 256,
            layers: 2,
            layer_norm: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Encoder,
    Decoder,
}

/// Per-patch latent vectors from one branch.
#[derive(Debug, Clone)]
pub struct LatentSet {
    pub vectors: Tensor,
    pub normalized: bool,
    pub branch: Branch,
}

impl LatentSet {
    pub fn len(&self) -> usize {
        self.vectors.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same latents with the gradient path cut.
    pub fn detach(&self) -> Self {
        Self {
            vectors: self.vectors.detach(),
            ..self.clone()
        }
    }
}

/// Linear layers with optional layer norm and ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    norms: Vec<Option<LayerNorm>>,
}

impl Mlp {
    fn new(
        init: &mut Init<'_>,
        prefix: &str,
        in_dim: usize,
        cfg: &HeadConfig,
        norm_last: bool,
    ) -> Result<Self> {
        if cfg.layers == 0 || cfg.latent_dim == 0 {
            return Err(Error::Config("head needs at least one layer and a positive width".into()));
        }
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let mut d = in_dim;
        for i in 0..cfg.layers {
            layers.push(init.linear(&format!("{prefix}.fc{i}"), d, cfg.latent_dim)?);
            let last = i + 1 == cfg.layers;
            let norm = cfg.layer_norm && (!last || norm_last);
            norms.push(if norm {
                Some(init.layer_norm(&format!("{prefix}.ln{i}"), cfg.latent_dim)?)
            } else {
                None
            });
            d = cfg.latent_dim;
        }
        Ok(Self { layers, norms })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dims()[0];
        if n == 0 {
            return Ok(Tensor::zeros((0, self.out_dim()), x.dtype(), x.device())?);
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, (layer, norm)) in self.layers.iter().zip(&self.norms).enumerate() {
            h = layer.forward(&h)?;
            if let Some(norm) = norm {
                h = norm.forward(&h)?;
            }
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// One encoder/decoder tap pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TapPair {
    pub encoder: usize,
    pub decoder: usize,
}

impl TapPair {
    pub fn new(encoder: usize, decoder: usize) -> Self {
        Self { encoder, decoder }
    }

    pub fn label(&self) -> String {
        format!("h{}_h{}", self.encoder, self.decoder)
    }
}

/// Shape information for one pair, taken from the generator layout.
#[derive(Debug, Clone, Copy)]
pub struct PairShape {
    pub pair: TapPair,
    pub encoder_channels: usize,
    pub decoder_channels: usize,
}

/// All head networks for a training run.
#[derive(Debug, Clone)]
pub struct Heads {
    config: HeadConfig,
    projections: BTreeMap<usize, Mlp>,
    predictions: BTreeMap<usize, Mlp>,
    aligners: BTreeMap<TapPair, Linear>,
    params: ParamStore,
}

impl Heads {
    /// Builds heads for the given pairs. With `align` set, every pair gets a
    /// pre-projection linear map from encoder to decoder channel width.
    pub fn new(
        config: &HeadConfig,
        pairs: &[PairShape],
        align: bool,
        scheme: InitScheme,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, rng, "heads", scheme);
        let mut projections = BTreeMap::new();
        let mut predictions = BTreeMap::new();
        let mut aligners = BTreeMap::new();
        let mut widths: Vec<usize> = Vec::new();
        for p in pairs {
            if !align && p.encoder_channels != p.decoder_channels {
                return Err(Error::Config(format!(
                    "pair {} has {} vs {} channels; enable asymmetric alignment to use it",
                    p.pair.label(),
                    p.encoder_channels,
                    p.decoder_channels
                )));
            }
            if !widths.contains(&p.decoder_channels) {
                widths.push(p.decoder_channels);
            }
        }
        widths.sort_unstable();
        for &w in &widths {
            projections.insert(w, Mlp::new(&mut init, &format!("projection.c{w}"), w, config, true)?);
            predictions.insert(
                w,
                Mlp::new(&mut init, &format!("prediction.c{w}"), config.latent_dim, config, false)?,
            );
        }
        if align {
            for p in pairs {
                let lin = init.linear(
                    &format!("align.{}", p.pair.label()),
                    p.encoder_channels,
                    p.decoder_channels,
                )?;
                aligners.insert(p.pair, lin);
            }
        }
        Ok(Self {
            config: config.clone(),
            projections,
            predictions,
            aligners,
            params,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn projection(&self, width: usize) -> Option<&Mlp> {
        self.projections.get(&width)
    }

    pub fn prediction(&self, width: usize) -> Option<&Mlp> {
        self.predictions.get(&width)
    }

    pub fn aligner(&self, pair: TapPair) -> Option<&Linear> {
        self.aligners.get(&pair)
    }

    pub fn is_aligned(&self) -> bool {
        !self.aligners.is_empty()
    }

    /// Projects (n, c) patch features to unnormalized latents.
    pub fn project(&self, patches: &Tensor, branch: Branch) -> Result<LatentSet> {
        let (_, c) = patches.dims2()?;
        let proj = self.projections.get(&c).ok_or_else(|| {
            Error::Config(format!(
                "no projection for {c}-channel patches; available widths {:?}",
                self.projections.keys().collect::<Vec<_>>()
            ))
        })?;
        Ok(LatentSet {
            vectors: proj.forward(patches)?,
            normalized: false,
            branch,
        })
    }

    /// Applies the prediction head that belongs to the `width` projection.
    pub fn predict(&self, latents: &LatentSet, width: usize) -> Result<LatentSet> {
        if latents.branch != Branch::Decoder {
            return Err(Error::Usage(
                "the prediction head applies to decoder-branch latents only".into(),
            ));
        }
        if latents.normalized {
            return Err(Error::Usage("prediction expects unnormalized latents".into()));
        }
        let pred = self
            .predictions
            .get(&width)
            .ok_or_else(|| Error::Config(format!("no prediction head for width {width}")))?;
        Ok(LatentSet {
            vectors: pred.forward(&latents.vectors)?,
            normalized: false,
            branch: Branch::Decoder,
        })
    }

    /// Resizes the encoder map to the decoder grid. Channel alignment is
    /// applied afterwards to gathered patches via [`Heads::align_patches`],
    /// which is equivalent because the map is position-wise.
    pub fn resize_to_decoder(
        encoder: &StageFeatureMap,
        decoder: &StageFeatureMap,
    ) -> Result<StageFeatureMap> {
        let (h, w) = decoder.spatial_size();
        Ok(StageFeatureMap {
            tap_index: encoder.tap_index,
            tensor: ops::resize_bilinear(&encoder.tensor, h, w)?,
        })
    }

    /// Maps encoder patches to the decoder channel width for `pair`.
    /// Without alignment this is the identity.
    pub fn align_patches(&self, pair: TapPair, patches: &Tensor) -> Result<Tensor> {
        match self.aligners.get(&pair) {
            Some(lin) if patches.dims()[0] == 0 => Ok(Tensor::zeros(
                (0, lin.out_dim()),
                patches.dtype(),
                patches.device(),
            )?),
            Some(lin) => lin.forward(patches),
            None => Ok(patches.clone()),
        }
    }

    /// Resize plus per-position channel alignment of a whole feature pair.
    pub fn pre_project_align(
        &self,
        pair: TapPair,
        encoder: &StageFeatureMap,
        decoder: &StageFeatureMap,
    ) -> Result<(Tensor, Tensor)> {
        let resized = Self::resize_to_decoder(encoder, decoder)?;
        let to_rows = |t: &Tensor| -> Result<Tensor> {
            let (b, c, h, w) = t.dims4()?;
            Ok(t.reshape((b, c, h * w))?.transpose(1, 2)?.reshape((b * h * w, c))?)
        };
        let enc = self.align_patches(pair, &to_rows(&resized.tensor)?)?;
        let dec = to_rows(&decoder.tensor)?;
        Ok((enc, dec))
    }
}

/// Scales every row to unit L2 norm; fails on degenerate rows.
pub fn normalize(latents: &LatentSet) -> Result<LatentSet> {
    Ok(LatentSet {
        vectors: normalize_rows(&latents.vectors)?,
        normalized: true,
        branch: latents.branch,
    })
}

pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let (n, _) = x.dims2()?;
    if n == 0 {
        return Ok(x.clone());
    }
    let norms = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let smallest = norms
        .detach()
        .to_dtype(DType::F64)?
        .min_all()?
        .to_scalar::<f64>()?;
    if !(smallest >= MIN_NORM) {
        return Err(Error::Numeric(format!(
            "cannot normalize a latent row with norm {smallest:e} (< {MIN_NORM:e})"
        )));
    }
    Ok(x.broadcast_div(&norms)?)
}

/// Identity-configured MLP used by tests and the alignment equivalence check.
pub fn set_identity(mlp: &Mlp) -> Result<()> {
    for l in &mlp.layers {
        l.set_identity()?;
    }
    for n in mlp.norms.iter().flatten() {
        let d = n.gamma.dims()[0];
        n.gamma.set(&Tensor::ones(d, DType::F32, &Device::Cpu)?)?;
        n.beta.set(&Tensor::zeros(d, DType::F32, &Device::Cpu)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn pairs() -> Vec<PairShape> {
        vec![
            PairShape { pair: TapPair::new(7, 24), encoder_channels: 128, decoder_channels: 128 },
            PairShape { pair: TapPair::new(13, 18), encoder_channels: 256, decoder_channels: 256 },
        ]
    }

    fn heads(cfg: &HeadConfig) -> Heads {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Heads::new(cfg, &pairs(), false, InitScheme::default(), &mut rng).unwrap()
    }

    #[test]
    fn projection_output_is_latent_dim() -> Result<()> {
        let h = heads(&HeadConfig::default());
        for c in [128usize, 256] {
            let x = Tensor::randn(0f32, 1.0, (5, c), &Device::Cpu)?;
            let z = h.project(&x, Branch::Encoder)?;
            assert_eq!(z.vectors.dims(), &[5, 256]);
        }
        let bad = Tensor::zeros((2, 64), DType::F32, &Device::Cpu)?;
        assert!(matches!(h.project(&bad, Branch::Encoder), Err(Error::Config(_))));
        Ok(())
    }

    #[test]
    fn empty_and_duplicate_rows() -> Result<()> {
        let h = heads(&HeadConfig::default());
        let empty = Tensor::zeros((0, 128), DType::F32, &Device::Cpu)?;
        let z = h.project(&empty, Branch::Decoder)?;
        assert!(z.is_empty());
        assert!(h.predict(&z, 128)?.is_empty());
        let row = Tensor::randn(0f32, 1.0, (1, 128), &Device::Cpu)?;
        let two = Tensor::cat(&[&row, &row], 0)?;
        let z = h.project(&two, Branch::Decoder)?.vectors.to_vec2::<f32>()?;
        assert_eq!(z[0], z[1]);
        Ok(())
    }

    #[test]
    fn prediction_rejects_encoder_branch() -> Result<()> {
        let h = heads(&HeadConfig::default());
        let x = Tensor::randn(0f32, 1.0, (3, 128), &Device::Cpu)?;
        let z = h.project(&x, Branch::Encoder)?;
        assert!(matches!(h.predict(&z, 128), Err(Error::Usage(_))));
        Ok(())
    }

    #[test]
    fn identity_prediction_passes_nonnegative_input() -> Result<()> {
        let cfg = HeadConfig { layer_norm: false, ..Default::default() };
        let h = heads(&cfg);
        set_identity(h.prediction(128).unwrap())?;
        let x = Tensor::rand(0f32, 1.0, (4, 256), &Device::Cpu)?;
        let z = LatentSet { vectors: x.clone(), normalized: false, branch: Branch::Decoder };
        let p = h.predict(&z, 128)?;
        assert_eq!(p.vectors.to_vec2::<f32>()?, x.to_vec2::<f32>()?);
        Ok(())
    }

    #[test]
    fn layer_norm_placement() {
        let h = heads(&HeadConfig::default());
        let proj = h.projection(128).unwrap();
        let pred = h.prediction(128).unwrap();
        assert!(proj.norms.iter().all(Option::is_some));
        assert!(pred.norms[0].is_some());
        assert!(pred.norms[1].is_none());
        let names: Vec<_> = h.params().iter().map(|(k, _)| k.clone()).collect();
        assert!(names.contains(&"heads.projection.c256.fc0.weight".to_string()));
        assert!(!names.iter().any(|n| n.starts_with("heads.prediction.c128.ln1")));
    }

    #[test]
    fn normalize_examples() -> Result<()> {
        let mut v = vec![0f32; 256];
        v[0] = 3.0;
        v[1] = 4.0;
        let t = Tensor::from_vec(v, (1, 256), &Device::Cpu)?;
        let n = normalize_rows(&t)?.to_vec2::<f32>()?;
        assert!((n[0][0] - 0.6).abs() < 1e-7 && (n[0][1] - 0.8).abs() < 1e-7);
        let again = normalize_rows(&normalize_rows(&t)?)?.to_vec2::<f32>()?;
        assert!(n[0].iter().zip(&again[0]).all(|(a, b)| (a - b).abs() <= 1e-7));
        let zero = Tensor::zeros((2, 256), DType::F32, &Device::Cpu)?;
        assert!(matches!(normalize_rows(&zero), Err(Error::Numeric(_))));
        Ok(())
    }

    #[test]
    fn one_projection_per_width_shared_by_branches() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shapes = vec![
            PairShape { pair: TapPair::new(3, 24), encoder_channels: 64, decoder_channels: 128 },
            PairShape { pair: TapPair::new(7, 20), encoder_channels: 128, decoder_channels: 256 },
            PairShape { pair: TapPair::new(13, 17), encoder_channels: 256, decoder_channels: 256 },
        ];
        let h = Heads::new(&HeadConfig::default(), &shapes, true, InitScheme::default(), &mut rng)?;
        assert_eq!(h.projections.len(), 2);
        assert_eq!(h.aligners.len(), 3);
        let enc = StageFeatureMap {
            tap_index: 3,
            tensor: Tensor::randn(0f32, 1.0, (1, 64, 16, 16), &Device::Cpu)?,
        };
        let dec = StageFeatureMap {
            tap_index: 24,
            tensor: Tensor::randn(0f32, 1.0, (1, 128, 8, 8), &Device::Cpu)?,
        };
        let (e, d) = h.pre_project_align(TapPair::new(3, 24), &enc, &dec)?;
        assert_eq!(e.dims(), &[64, 128]);
        assert_eq!(d.dims(), &[64, 128]);
        let mismatched = Heads::new(&HeadConfig::default(), &shapes, false, InitScheme::default(), &mut rng);
        assert!(matches!(mismatched, Err(Error::Config(_))));
        Ok(())
    }
}
