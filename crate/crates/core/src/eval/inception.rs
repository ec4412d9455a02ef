//! InceptionV3 pool3 feature extractor in the layout of the FID reference
//! network (pytorch-fid's `FIDInception*` blocks). Weights are read from a
//! safetensors file using that network's state-dict names, e.g.
//! `Mixed_5b.branch1x1.conv.weight` or `Conv2d_1a_3x3.bn.running_var`.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::eval::embedder::Extractor;

const BN_EPS: f64 = 1e-3;
pub const INPUT_SIZE: usize = 299;
pub const FEATURE_DIM: usize = 2048;
/// Artifact the weights file is expected to be converted from.
pub const WEIGHTS_ARTIFACT: &str = "pt_inception-2015-12-05 (FID InceptionV3) converted to safetensors";

enum Source<'a> {
    Weights(&'a BTreeMap<String, Tensor>),
    Random(ChaCha8Rng),
}

/// Conv (no bias) + inference batch norm folded into scale/shift + ReLU.
#[derive(Debug, Clone)]
struct BasicConv {
    weight: Tensor,
    scale: Tensor,
    shift: Tensor,
    stride: usize,
    pad: (usize, usize),
}

impl BasicConv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        if self.pad.0 > 0 {
            x = x.pad_with_zeros(2, self.pad.0, self.pad.0)?;
        }
        if self.pad.1 > 0 {
            x = x.pad_with_zeros(3, self.pad.1, self.pad.1)?;
        }
        let y = x.conv2d(&self.weight, 0, self.stride, 1, 1)?;
        Ok(y.broadcast_mul(&self.scale)?.broadcast_add(&self.shift)?.relu()?)
    }
}

struct Builder<'a> {
    source: Source<'a>,
}

impl Builder<'_> {
    fn take(&mut self, name: &str, dims: &[usize], fill: Option<f32>) -> Result<Tensor> {
        match &mut self.source {
            Source::Weights(map) => {
                let t = map.get(name).ok_or_else(|| {
                    Error::Data(format!("inception weights lack tensor {name}; expected {WEIGHTS_ARTIFACT}"))
                })?;
                if t.dims() != dims {
                    return Err(Error::dim(format!("inception tensor {name}"), dims, t.dims()));
                }
                Ok(t.to_dtype(DType::F32)?)
            }
            Source::Random(rng) => {
                let n: usize = dims.iter().product();
                let v: Vec<f32> = match fill {
                    Some(c) => vec![c; n],
                    None => {
                        let fan_in: usize = dims[1..].iter().product();
                        let dist = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt())
                            .map_err(|e| Error::Config(e.to_string()))?;
                        (0..n).map(|_| dist.sample(rng)).collect()
                    }
                };
                Ok(Tensor::from_vec(v, dims, &Device::Cpu)?)
            }
        }
    }

    fn conv(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: (usize, usize),
        stride: usize,
        pad: (usize, usize),
    ) -> Result<BasicConv> {
        let weight = self.take(&format!("{name}.conv.weight"), &[out_c, in_c, k.0, k.1], None)?;
        let gamma = self.take(&format!("{name}.bn.weight"), &[out_c], Some(1.0))?;
        let beta = self.take(&format!("{name}.bn.bias"), &[out_c], Some(0.0))?;
        let mean = self.take(&format!("{name}.bn.running_mean"), &[out_c], Some(0.0))?;
        let var = self.take(&format!("{name}.bn.running_var"), &[out_c], Some(1.0))?;
        let scale = (gamma / (var + BN_EPS)?.sqrt()?)?;
        let shift = (beta - (&mean * &scale)?)?;
        Ok(BasicConv {
            weight,
            scale: scale.reshape((1, out_c, 1, 1))?,
            shift: shift.reshape((1, out_c, 1, 1))?,
            stride,
            pad,
        })
    }

    fn sq(&mut self, name: &str, i: usize, o: usize, k: usize, s: usize, p: usize) -> Result<BasicConv> {
        self.conv(name, i, o, (k, k), s, (p, p))
    }
}

fn pad_value(x: &Tensor, pad: usize, value: f32) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let col = Tensor::full(value, (b, c, h, pad), x.device())?;
    let x = Tensor::cat(&[&col, x, &col], 3)?;
    let row = Tensor::full(value, (b, c, pad, w + 2 * pad), x.device())?;
    Ok(Tensor::cat(&[&row, &x, &row], 2)?)
}

fn max_pool(x: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let x = if pad > 0 { pad_value(x, pad, f32::NEG_INFINITY)? } else { x.clone() };
    Ok(x.max_pool2d_with_stride(3, stride)?)
}

/// 3×3 stride-1 average pool with padding 1 that excludes padded cells.
fn avg_pool_exclusive(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let sum = pad_value(x, 1, 0.0)?.avg_pool2d_with_stride(3, 1)?;
    let ones = Tensor::ones((1, 1, h, w), DType::F32, x.device())?;
    let count = pad_value(&ones, 1, 0.0)?.avg_pool2d_with_stride(3, 1)?;
    Ok(sum.broadcast_div(&count)?)
}

fn cat(parts: &[Tensor]) -> Result<Tensor> {
    Ok(Tensor::cat(parts, 1)?)
}

struct BlockA {
    b1: BasicConv,
    b5: [BasicConv; 2],
    b3: [BasicConv; 3],
    pool: BasicConv,
}

impl BlockA {
    fn new(bd: &mut Builder, n: &str, i: usize, pool_features: usize) -> Result<Self> {
        Ok(Self {
            b1: bd.sq(&format!("{n}.branch1x1"), i, 64, 1, 1, 0)?,
            b5: [
                bd.sq(&format!("{n}.branch5x5_1"), i, 48, 1, 1, 0)?,
                bd.sq(&format!("{n}.branch5x5_2"), 48, 64, 5, 1, 2)?,
            ],
            b3: [
                bd.sq(&format!("{n}.branch3x3dbl_1"), i, 64, 1, 1, 0)?,
                bd.sq(&format!("{n}.branch3x3dbl_2"), 64, 96, 3, 1, 1)?,
                bd.sq(&format!("{n}.branch3x3dbl_3"), 96, 96, 3, 1, 1)?,
            ],
            pool: bd.sq(&format!("{n}.branch_pool"), i, pool_features, 1, 1, 0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.b1.forward(x)?;
        let b = self.b5[1].forward(&self.b5[0].forward(x)?)?;
        let c = self.b3[2].forward(&self.b3[1].forward(&self.b3[0].forward(x)?)?)?;
        let d = self.pool.forward(&avg_pool_exclusive(x)?)?;
        cat(&[a, b, c, d])
    }
}

struct BlockB {
    b3: BasicConv,
    dbl: [BasicConv; 3],
}

impl BlockB {
    fn new(bd: &mut Builder, n: &str, i: usize) -> Result<Self> {
        Ok(Self {
            b3: bd.sq(&format!("{n}.branch3x3"), i, 384, 3, 2, 0)?,
            dbl: [
                bd.sq(&format!("{n}.branch3x3dbl_1"), i, 64, 1, 1, 0)?,
                bd.sq(&format!("{n}.branch3x3dbl_2"), 64, 96, 3, 1, 1)?,
                bd.sq(&format!("{n}.branch3x3dbl_3"), 96, 96, 3, 2, 0)?,
            ],
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.b3.forward(x)?;
        let b = self.dbl[2].forward(&self.dbl[1].forward(&self.dbl[0].forward(x)?)?)?;
        cat(&[a, b, max_pool(x, 2, 0)?])
    }
}

struct BlockC {
    b1: BasicConv,
    b7: Vec<BasicConv>,
    dbl: Vec<BasicConv>,
    pool: BasicConv,
}

impl BlockC {
    fn new(bd: &mut Builder, n: &str, i: usize, c7: usize) -> Result<Self> {
        let row = (1, 7);
        let col = (7, 1);
        let (pr, pc) = ((0, 3), (3, 0));
        Ok(Self {
            b1: bd.sq(&format!("{n}.branch1x1"), i, 192, 1, 1, 0)?,
            b7: vec![
                bd.sq(&format!("{n}.branch7x7_1"), i, c7, 1, 1, 0)?,
                bd.conv(&format!("{n}.branch7x7_2"), c7, c7, row, 1, pr)?,
                bd.conv(&format!("{n}.branch7x7_3"), c7, 192, col, 1, pc)?,
            ],
            dbl: vec![
                bd.sq(&format!("{n}.branch7x7dbl_1"), i, c7, 1, 1, 0)?,
                bd.conv(&format!("{n}.branch7x7dbl_2"), c7, c7, col, 1, pc)?,
                bd.conv(&format!("{n}.branch7x7dbl_3"), c7, c7, row, 1, pr)?,
                bd.conv(&format!("{n}.branch7x7dbl_4"), c7, c7, col, 1, pc)?,
                bd.conv(&format!("{n}.branch7x7dbl_5"), c7, 192, row, 1, pr)?,
            ],
            pool: bd.sq(&format!("{n}.branch_pool"), i, 192, 1, 1, 0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let chain = |convs: &[BasicConv]| -> Result<Tensor> {
            let mut h = x.clone();
            for c in convs {
                h = c.forward(&h)?;
            }
            Ok(h)
        };
        let a = self.b1.forward(x)?;
        let b = chain(&self.b7)?;
        let c = chain(&self.dbl)?;
        let d = self.pool.forward(&avg_pool_exclusive(x)?)?;
        cat(&[a, b, c, d])
    }
}

struct BlockD {
    b3: [BasicConv; 2],
    b7: [BasicConv; 4],
}

impl BlockD {
    fn new(bd: &mut Builder, n: &str, i: usize) -> Result<Self> {
        Ok(Self {
            b3: [
                bd.sq(&format!("{n}.branch3x3_1"), i, 192, 1, 1, 0)?,
                bd.sq(&format!("{n}.branch3x3_2"), 192, 320, 3, 2, 0)?,
            ],
            b7: [
                bd.sq(&format!("{n}.branch7x7x3_1"), i, 192, 1, 1, 0)?,
                bd.conv(&format!("{n}.branch7x7x3_2"), 192, 192, (1, 7), 1, (0, 3))?,
                bd.conv(&format!("{n}.branch7x7x3_3"), 192, 192, (7, 1), 1, (3, 0))?,
                bd.sq(&format!("{n}.branch7x7x3_4"), 192, 192, 3, 2, 0)?,
            ],
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.b3[1].forward(&self.b3[0].forward(x)?)?;
        let mut b = x.clone();
        for c in &self.b7 {
            b = c.forward(&b)?;
        }
        cat(&[a, b, max_pool(x, 2, 0)?])
    }
}

struct BlockE {
    b1: BasicConv,
    b3_1: BasicConv,
    b3_2a: BasicConv,
    b3_2b: BasicConv,
    dbl_1: BasicConv,
    dbl_2: BasicConv,
    dbl_3a: BasicConv,
    dbl_3b: BasicConv,
    pool: BasicConv,
    max_pool: bool,
}

impl BlockE {
    fn new(bd: &mut Builder, n: &str, i: usize, max_pool: bool) -> Result<Self> {
        Ok(Self {
            b1: bd.sq(&format!("{n}.branch1x1"), i, 320, 1, 1, 0)?,
            b3_1: bd.sq(&format!("{n}.branch3x3_1"), i, 384, 1, 1, 0)?,
            b3_2a: bd.conv(&format!("{n}.branch3x3_2a"), 384, 384, (1, 3), 1, (0, 1))?,
            b3_2b: bd.conv(&format!("{n}.branch3x3_2b"), 384, 384, (3, 1), 1, (1, 0))?,
            dbl_1: bd.sq(&format!("{n}.branch3x3dbl_1"), i, 448, 1, 1, 0)?,
            dbl_2: bd.sq(&format!("{n}.branch3x3dbl_2"), 448, 384, 3, 1, 1)?,
            dbl_3a: bd.conv(&format!("{n}.branch3x3dbl_3a"), 384, 384, (1, 3), 1, (0, 1))?,
            dbl_3b: bd.conv(&format!("{n}.branch3x3dbl_3b"), 384, 384, (3, 1), 1, (1, 0))?,
            pool: bd.sq(&format!("{n}.branch_pool"), i, 192, 1, 1, 0)?,
            max_pool,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.b1.forward(x)?;
        let h = self.b3_1.forward(x)?;
        let b = cat(&[self.b3_2a.forward(&h)?, self.b3_2b.forward(&h)?])?;
        let h = self.dbl_2.forward(&self.dbl_1.forward(x)?)?;
        let c = cat(&[self.dbl_3a.forward(&h)?, self.dbl_3b.forward(&h)?])?;
        let pooled = if self.max_pool { max_pool(x, 1, 1)? } else { avg_pool_exclusive(x)? };
        let d = self.pool.forward(&pooled)?;
        cat(&[a, b, c, d])
    }
}

pub struct InceptionV3 {
    stem: Vec<BasicConv>,
    mixed_5: Vec<BlockA>,
    mixed_6a: BlockB,
    mixed_6: Vec<BlockC>,
    mixed_7a: BlockD,
    mixed_7: Vec<BlockE>,
}

impl InceptionV3 {
    fn build(mut bd: Builder) -> Result<Self> {
        let stem = vec![
            bd.sq("Conv2d_1a_3x3", 3, 32, 3, 2, 0)?,
            bd.sq("Conv2d_2a_3x3", 32, 32, 3, 1, 0)?,
            bd.sq("Conv2d_2b_3x3", 32, 64, 3, 1, 1)?,
            bd.sq("Conv2d_3b_1x1", 64, 80, 1, 1, 0)?,
            bd.sq("Conv2d_4a_3x3", 80, 192, 3, 1, 0)?,
        ];
        let mixed_5 = vec![
            BlockA::new(&mut bd, "Mixed_5b", 192, 32)?,
            BlockA::new(&mut bd, "Mixed_5c", 256, 64)?,
            BlockA::new(&mut bd, "Mixed_5d", 288, 64)?,
        ];
        let mixed_6a = BlockB::new(&mut bd, "Mixed_6a", 288)?;
        let mixed_6 = vec![
            BlockC::new(&mut bd, "Mixed_6b", 768, 128)?,
            BlockC::new(&mut bd, "Mixed_6c", 768, 160)?,
            BlockC::new(&mut bd, "Mixed_6d", 768, 160)?,
            BlockC::new(&mut bd, "Mixed_6e", 768, 192)?,
        ];
        let mixed_7a = BlockD::new(&mut bd, "Mixed_7a", 768)?;
        let mixed_7 = vec![
            BlockE::new(&mut bd, "Mixed_7b", 1280, false)?,
            BlockE::new(&mut bd, "Mixed_7c", 2048, true)?,
        ];
        Ok(Self {
            stem,
            mixed_5,
            mixed_6a,
            mixed_6,
            mixed_7a,
            mixed_7,
        })
    }

    pub fn from_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        Self::build(Builder {
            source: Source::Weights(tensors),
        })
    }

    /// Loads weights from a safetensors file.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Data(format!(
                "inception weights not found at {}; expected {WEIGHTS_ARTIFACT}",
                path.display()
            )));
        }
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&buf)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut map = BTreeMap::new();
        for (name, view) in st.tensors() {
            let values: Vec<f32> = match view.dtype() {
                safetensors::Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
                other => {
                    return Err(Error::Data(format!("inception tensor {name} has dtype {other:?}, expected F32")))
                }
            };
            map.insert(name, Tensor::from_vec(values, view.shape(), &Device::Cpu)?);
        }
        Self::from_tensors(&map)
    }

    /// Randomly initialized network with identity batch norms.
    pub fn random(seed: u64) -> Result<Self> {
        Self::build(Builder {
            source: Source::Random(ChaCha8Rng::seed_from_u64(seed)),
        })
    }

    /// Pool3 features of images already at 299×299, scaled to [-1, 1].
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = &self.stem;
        let mut h = s[2].forward(&s[1].forward(&s[0].forward(x)?)?)?;
        h = max_pool(&h, 2, 0)?;
        h = s[4].forward(&s[3].forward(&h)?)?;
        h = max_pool(&h, 2, 0)?;
        for b in &self.mixed_5 {
            h = b.forward(&h)?;
        }
        h = self.mixed_6a.forward(&h)?;
        for b in &self.mixed_6 {
            h = b.forward(&h)?;
        }
        h = self.mixed_7a.forward(&h)?;
        for b in &self.mixed_7 {
            h = b.forward(&h)?;
        }
        Ok(h.flatten_from(2)?.mean(D::Minus1)?)
    }
}

/// Bicubic resize of every image in a (n, 3, h, w) batch.
pub fn resize_bicubic(images: &Tensor, size: usize) -> Result<Tensor> {
    let (n, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::dim("image channels", 3, c));
    }
    if h == size && w == size {
        return Ok(images.to_dtype(DType::F32)?);
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let planar = images.get(i)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let img: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let at = |ch: usize| planar[ch * h * w + y as usize * w + x as usize];
            Rgb([at(0), at(1), at(2)])
        });
        let r = image::imageops::resize(&img, size as u32, size as u32, FilterType::CatmullRom);
        let mut back = vec![0f32; 3 * size * size];
        for (x, y, p) in r.enumerate_pixels() {
            for ch in 0..3 {
                back[ch * size * size + y as usize * size + x as usize] = p[ch];
            }
        }
        out.push(Tensor::from_vec(back, (3, size, size), &Device::Cpu)?);
    }
    Ok(Tensor::stack(&out, 0)?)
}

impl Extractor for InceptionV3 {
    fn dim(&self) -> usize {
        FEATURE_DIM
    }

    fn features(&self, images: &Tensor) -> Result<Tensor> {
        self.forward(&resize_bicubic(images, INPUT_SIZE)?)
    }
}
