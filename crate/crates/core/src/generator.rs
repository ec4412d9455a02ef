//! ResNet encoder/decoder generator with addressable intermediate taps.
//!
//! Taps are named `h_l` with `l` counting the primitive layers of the
//! reference layout (pad, conv, norm, activation, ...), so at the default
//! depth the encoder exposes h3, h6, h7, h10, h11, h12..h15 and the decoder
//! h16..h20, h21, h24, h25, h28 and the output h31. Encoder tap `l` pairs
//! with decoder tap `last - l`.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Grad, Init, InitScheme, ParamStore};
use crate::ops::{self, Padding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub input_channels: usize,
    pub base_width: usize,
    pub n_downsamples: usize,
    pub n_resblocks_encoder: usize,
    pub n_resblocks_decoder: usize,
    pub image_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            base_width: 64,
            n_downsamples: 2,
            n_resblocks_encoder: 4,
            n_resblocks_decoder: 5,
            image_size: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StageKind {
    Stem,
    ConvDown,
    Downsample,
    ResBlock,
    Upsample,
    ConvUp,
    Output,
}

#[derive(Debug, Clone, Copy)]
struct StageSpec {
    tap: usize,
    kind: StageKind,
    in_c: usize,
    out_c: usize,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("generator widths must be positive".into()));
        }
        if self.n_resblocks_encoder + self.n_resblocks_decoder == 0 {
            return Err(Error::Config("generator needs at least one residual block".into()));
        }
        Ok(())
    }

    fn plan(&self) -> Vec<StageSpec> {
        let w = self.base_width;
        let mut plan = vec![StageSpec {
            tap: 3,
            kind: StageKind::Stem,
            in_c: self.input_channels,
            out_c: w,
        }];
        let mut c = w;
        let mut tap = 3;
        for _ in 0..self.n_downsamples {
            tap += 3;
            plan.push(StageSpec { tap, kind: StageKind::ConvDown, in_c: c, out_c: 2 * c });
            c *= 2;
            tap += 1;
            plan.push(StageSpec { tap, kind: StageKind::Downsample, in_c: c, out_c: c });
        }
        for _ in 0..self.n_resblocks_encoder + self.n_resblocks_decoder {
            tap += 1;
            plan.push(StageSpec { tap, kind: StageKind::ResBlock, in_c: c, out_c: c });
        }
        for _ in 0..self.n_downsamples {
            tap += 1;
            plan.push(StageSpec { tap, kind: StageKind::Upsample, in_c: c, out_c: c });
            tap += 3;
            plan.push(StageSpec { tap, kind: StageKind::ConvUp, in_c: c, out_c: c / 2 });
            c /= 2;
        }
        tap += 3;
        plan.push(StageSpec {
            tap,
            kind: StageKind::Output,
            in_c: c,
            out_c: self.input_channels,
        });
        plan
    }

    /// Number of plan stages belonging to the encoder.
    fn encoder_len(&self) -> usize {
        1 + 2 * self.n_downsamples + self.n_resblocks_encoder
    }

    /// Tap index of the final encoder activation.
    pub fn bottleneck_tap(&self) -> usize {
        self.plan()[self.encoder_len() - 1].tap
    }

    /// Tap index of the output image.
    pub fn output_tap(&self) -> usize {
        self.plan().last().map(|s| s.tap).unwrap_or(0)
    }

    pub fn encoder_taps(&self) -> Vec<usize> {
        self.plan()[..self.encoder_len()].iter().map(|s| s.tap).collect()
    }

    pub fn decoder_taps(&self) -> Vec<usize> {
        self.plan()[self.encoder_len()..].iter().map(|s| s.tap).collect()
    }

    /// The decoder tap at the same stage as encoder tap `tap`.
    pub fn mirror_tap(&self, tap: usize) -> usize {
        self.output_tap() - tap
    }

    /// Channel count at a tap, if it exists.
    pub fn tap_channels(&self, tap: usize) -> Option<usize> {
        self.plan().iter().find(|s| s.tap == tap).map(|s| s.out_c)
    }

    /// Spatial size of a tap for an `h × w` input.
    pub fn tap_spatial(&self, tap: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for s in self.plan() {
            match s.kind {
                StageKind::Downsample => {
                    h = ops::blur_out_size(h);
                    w = ops::blur_out_size(w);
                }
                StageKind::Upsample => {
                    h *= 2;
                    w *= 2;
                }
                _ => {}
            }
            if s.tap == tap {
                return Some((h, w));
            }
        }
        None
    }

    /// Checks that an input size survives the down/up path unchanged.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.n_downsamples;
        let min = 2 * f;
        if h % f != 0 || w % f != 0 || h < min || w < min {
            return Err(Error::dim(
                "generator input",
                format!("spatial size divisible by {f} and at least {min}"),
                (h, w),
            ));
        }
        Ok(())
    }
}

/// One tapped intermediate activation.
#[derive(Debug, Clone)]
pub struct StageFeatureMap {
    pub tap_index: usize,
    pub tensor: Tensor,
}

impl StageFeatureMap {
    pub fn channels(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn spatial_size(&self) -> (usize, usize) {
        let d = self.tensor.dims();
        (d[2], d[3])
    }
}

pub type FeatureTaps = BTreeMap<usize, StageFeatureMap>;

#[derive(Debug, Clone)]
enum Layer {
    ConvNormRelu(Conv2d),
    Downsample,
    ResBlock(Conv2d, Conv2d),
    Upsample,
    Output(Conv2d),
}

#[derive(Debug, Clone)]
struct Stage {
    tap: usize,
    layer: Layer,
}

impl Stage {
    fn forward(&self, x: &Tensor, grad: Grad) -> Result<Tensor> {
        match &self.layer {
            Layer::ConvNormRelu(conv) => Ok(ops::instance_norm(&conv.forward(x, grad)?)?.relu()?),
            Layer::Downsample => ops::blur_downsample(x),
            Layer::ResBlock(c1, c2) => {
                let y = ops::instance_norm(&c1.forward(x, grad)?)?.relu()?;
                let y = ops::instance_norm(&c2.forward(&y, grad)?)?;
                Ok((x + y)?)
            }
            Layer::Upsample => ops::upsample_nearest2x(x),
            Layer::Output(conv) => Ok(conv.forward(x, grad)?.tanh()?),
        }
    }
}

/// Encoder/decoder generator. Cloning shares the underlying parameters.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    stages: Vec<Stage>,
    encoder_len: usize,
    params: ParamStore,
    grad: Grad,
}

impl Generator {
    pub fn new(config: &GeneratorConfig, scheme: InitScheme, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, rng, "generator", scheme);
        let mut stages = Vec::new();
        for s in config.plan() {
            let name = format!("h{}", s.tap);
            let layer = match s.kind {
                StageKind::Stem => Layer::ConvNormRelu(init.conv(
                    &format!("{name}.conv"),
                    s.in_c,
                    s.out_c,
                    7,
                    3,
                    1,
                    Padding::Reflect,
                )?),
                StageKind::ConvDown | StageKind::ConvUp => Layer::ConvNormRelu(init.conv(
                    &format!("{name}.conv"),
                    s.in_c,
                    s.out_c,
                    3,
                    1,
                    1,
                    Padding::Reflect,
                )?),
                StageKind::Downsample => Layer::Downsample,
                StageKind::ResBlock => Layer::ResBlock(
                    init.conv(&format!("{name}.conv1"), s.in_c, s.out_c, 3, 1, 1, Padding::Reflect)?,
                    init.conv(&format!("{name}.conv2"), s.out_c, s.out_c, 3, 1, 1, Padding::Reflect)?,
                ),
                StageKind::Upsample => Layer::Upsample,
                StageKind::Output => Layer::Output(init.conv(
                    &format!("{name}.conv"),
                    s.in_c,
                    s.out_c,
                    7,
                    3,
                    1,
                    Padding::Reflect,
                )?),
            };
            stages.push(Stage { tap: s.tap, layer });
        }
        Ok(Self {
            encoder_len: config.encoder_len(),
            config: config.clone(),
            stages,
            params,
            grad: Grad::Track,
        })
    }

    /// A view sharing these parameters whose forward passes record no
    /// gradient graph, for evaluation and export.
    pub fn frozen(&self) -> Self {
        Self {
            grad: Grad::Frozen,
            ..self.clone()
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn check_taps(&self, taps: &[usize], valid: &[usize], side: &str) -> Result<BTreeSet<usize>> {
        let set: BTreeSet<usize> = taps.iter().copied().collect();
        if let Some(bad) = set.iter().find(|t| !valid.contains(t)) {
            return Err(Error::Config(format!(
                "h{bad} is not a {side} tap; valid {side} taps are {valid:?}"
            )));
        }
        Ok(set)
    }

    fn run(
        &self,
        stages: &[Stage],
        mut x: Tensor,
        wanted: &BTreeSet<usize>,
    ) -> Result<(Tensor, FeatureTaps)> {
        let mut taps = FeatureTaps::new();
        for stage in stages {
            x = stage.forward(&x, self.grad)?;
            if wanted.contains(&stage.tap) {
                taps.insert(
                    stage.tap,
                    StageFeatureMap {
                        tap_index: stage.tap,
                        tensor: x.clone(),
                    },
                );
            }
        }
        Ok((x, taps))
    }

    /// Runs the encoder, returning the bottleneck activation and the
    /// requested encoder taps.
    pub fn encode(&self, x: &Tensor, taps: &[usize]) -> Result<(StageFeatureMap, FeatureTaps)> {
        let wanted = self.check_taps(taps, &self.config.encoder_taps(), "encoder")?;
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.input_channels {
            return Err(Error::dim("generator input channels", self.config.input_channels, c));
        }
        self.config.check_input_size(h, w)?;
        let (bottleneck, features) = self.run(&self.stages[..self.encoder_len], x.clone(), &wanted)?;
        Ok((
            StageFeatureMap {
                tap_index: self.config.bottleneck_tap(),
                tensor: bottleneck,
            },
            features,
        ))
    }

    /// Runs the decoder from a bottleneck activation.
    pub fn decode(&self, bottleneck: &StageFeatureMap, taps: &[usize]) -> Result<(Tensor, FeatureTaps)> {
        let wanted = self.check_taps(taps, &self.config.decoder_taps(), "decoder")?;
        let expected_c = self
            .config
            .tap_channels(self.config.bottleneck_tap())
            .unwrap_or_default();
        let dims = bottleneck.tensor.dims();
        if dims.len() != 4 || dims[1] != expected_c || dims[2] < 2 || dims[3] < 2 {
            return Err(Error::dim(
                "decoder input",
                format!("(batch, {expected_c}, h >= 2, w >= 2)"),
                dims,
            ));
        }
        self.run(&self.stages[self.encoder_len..], bottleneck.tensor.clone(), &wanted)
    }

    /// Encoder and decoder taps from a single forward pass.
    pub fn forward_with_taps(
        &self,
        x: &Tensor,
        encoder_taps: &[usize],
        decoder_taps: &[usize],
    ) -> Result<(Tensor, FeatureTaps)> {
        let (bottleneck, mut features) = self.encode(x, encoder_taps)?;
        let (image, dec) = self.decode(&bottleneck, decoder_taps)?;
        features.extend(dec);
        Ok((image, features))
    }

    pub fn translate(&self, x: &Tensor) -> Result<Tensor> {
        let (bottleneck, _) = self.encode(x, &[])?;
        Ok(self.decode(&bottleneck, &[])?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            base_width: 4,
            image_size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn default_layout_matches_reference_table() {
        let cfg = GeneratorConfig::default();
        assert_eq!(cfg.encoder_taps(), vec![3, 6, 7, 10, 11, 12, 13, 14, 15]);
        assert_eq!(cfg.decoder_taps(), vec![16, 17, 18, 19, 20, 21, 24, 25, 28, 31]);
        assert_eq!(cfg.bottleneck_tap(), 15);
        assert_eq!(cfg.output_tap(), 31);
        for (l, m) in [(7, 24), (13, 18), (3, 28), (11, 20), (15, 16)] {
            assert_eq!(cfg.mirror_tap(l), m);
            assert_eq!(cfg.tap_channels(l), cfg.tap_channels(m));
            assert_eq!(cfg.tap_spatial(l, 256, 256), cfg.tap_spatial(m, 256, 256));
        }
        let expect = [
            (3, 64, 256),
            (6, 128, 256),
            (7, 128, 128),
            (10, 256, 128),
            (11, 256, 64),
            (15, 256, 64),
            (21, 256, 128),
            (24, 128, 128),
            (25, 128, 256),
            (28, 64, 256),
            (31, 3, 256),
        ];
        for (tap, c, s) in expect {
            assert_eq!(cfg.tap_channels(tap), Some(c), "h{tap}");
            assert_eq!(cfg.tap_spatial(tap, 256, 256), Some((s, s)), "h{tap}");
        }
    }

    #[test]
    fn unknown_tap_names_valid_set() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Generator::new(&small(), InitScheme::default(), &mut rng)?;
        let x = Tensor::zeros((1, 3, 32, 32), candle_core::DType::F32, &Device::Cpu)?;
        let err = g.encode(&x, &[24]).unwrap_err().to_string();
        assert!(err.contains("valid encoder taps"), "{err}");
        let (b, f) = g.encode(&x, &[])?;
        assert!(f.is_empty());
        assert_eq!(b.tap_index, 15);
        let err = g.decode(&b, &[7]).unwrap_err().to_string();
        assert!(err.contains("valid decoder taps"), "{err}");
        Ok(())
    }

    #[test]
    fn reduced_resolution_tap_shapes() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = GeneratorConfig { base_width: 8, ..Default::default() };
        let g = Generator::new(&cfg, InitScheme::default(), &mut rng)?;
        let x = Tensor::randn(0f32, 0.5, (1, 3, 64, 64), &Device::Cpu)?.clamp(-1f32, 1f32)?;
        let (b, f) = g.encode(&x, &[7])?;
        assert_eq!(f[&7].tensor.dims(), &[1, 16, 32, 32]);
        let (img, d) = g.decode(&b, &[24, 18])?;
        assert_eq!(d[&24].tensor.dims(), &[1, 16, 32, 32]);
        assert_eq!(d[&18].tensor.dims(), &[1, 32, 16, 16]);
        assert_eq!(img.dims(), x.dims());
        Ok(())
    }

    #[test]
    fn rejects_indivisible_or_mismatched_input() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Generator::new(&small(), InitScheme::default(), &mut rng)?;
        let x = Tensor::zeros((1, 3, 30, 32), candle_core::DType::F32, &Device::Cpu)?;
        assert!(matches!(g.translate(&x), Err(Error::Dimension { .. })));
        let bad = StageFeatureMap {
            tap_index: 15,
            tensor: Tensor::zeros((1, 8, 8, 8), candle_core::DType::F32, &Device::Cpu)?,
        };
        let err = g.decode(&bad, &[]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }), "{err}");
        Ok(())
    }

    #[test]
    fn frozen_view_matches_and_records_nothing() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Generator::new(&small(), InitScheme::default(), &mut rng)?;
        let x = Tensor::randn(0f32, 0.5, (1, 3, 16, 16), &Device::Cpu)?;
        let a = g.translate(&x)?;
        let b = g.frozen().translate(&x)?;
        assert_eq!(a.flatten_all()?.to_vec1::<f32>()?, b.flatten_all()?.to_vec1::<f32>()?);
        assert!(a.track_op());
        assert!(!b.track_op());
        Ok(())
    }

    #[test]
    fn translate_equals_encode_decode_bitwise() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Generator::new(&small(), InitScheme::default(), &mut rng)?;
        let x = Tensor::randn(0f32, 0.5, (1, 3, 32, 32), &Device::Cpu)?;
        let a = g.translate(&x)?.flatten_all()?.to_vec1::<f32>()?;
        let (b, _) = g.encode(&x, &[7, 13])?;
        let (img, _) = g.decode(&b, &[24, 18])?;
        let b = img.flatten_all()?.to_vec1::<f32>()?;
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        let again = g.translate(&x)?.flatten_all()?.to_vec1::<f32>()?;
        assert_eq!(a, again);
        Ok(())
    }

    #[test]
    fn batch_forward_equals_per_sample_forward() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Generator::new(&small(), InitScheme::default(), &mut rng)?;
        let x = Tensor::randn(0f32, 0.5, (2, 3, 32, 32), &Device::Cpu)?;
        let both = g.translate(&x)?;
        for i in 0..2 {
            let single = g.translate(&x.narrow(0, i, 1)?)?;
            let diff = (both.narrow(0, i, 1)? - single)?.abs()?.max_all()?.to_scalar::<f32>()?;
            assert!(diff <= 1e-5, "item {i}: {diff}");
        }
        Ok(())
    }

    #[test]
    fn split_is_configurable() {
        let cfg = GeneratorConfig {
            n_resblocks_encoder: 5,
            n_resblocks_decoder: 4,
            ..Default::default()
        };
        assert_eq!(cfg.bottleneck_tap(), 16);
        assert_eq!(cfg.output_tap(), 31);
        let cfg = GeneratorConfig { n_downsamples: 3, ..Default::default() };
        assert_eq!(cfg.encoder_taps()[..7], [3, 6, 7, 10, 11, 14, 15]);
        assert_eq!(cfg.output_tap(), 39);
        assert_eq!(cfg.tap_channels(15), Some(512));
    }
}
