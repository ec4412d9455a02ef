//! Unpaired image folders and the synthetic hue-shift toy domains.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Folder names of the conventional unpaired layout.
pub const TRAIN_A: &str = "trainA";
pub const TRAIN_B: &str = "trainB";
pub const TEST_A: &str = "testA";
pub const TEST_B: &str = "testB";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnpairedDataset {
    pub domain_a_dir: PathBuf,
    pub domain_b_dir: PathBuf,
    pub image_size: usize,
    pub shuffle_seed: u64,
    /// Random horizontal flips.
    pub flip: bool,
}

impl Default for UnpairedDataset {
    fn default() -> Self {
        Self {
            domain_a_dir: PathBuf::from(TRAIN_A),
            domain_b_dir: PathBuf::from(TRAIN_B),
            image_size: 256,
            shuffle_seed: 0,
            flip: false,
        }
    }
}

impl UnpairedDataset {
    /// Training split under `root`.
    pub fn from_root(root: &Path, image_size: usize, shuffle_seed: u64) -> Self {
        Self {
            domain_a_dir: root.join(TRAIN_A),
            domain_b_dir: root.join(TRAIN_B),
            image_size,
            shuffle_seed,
            flip: false,
        }
    }
}

/// Image files of a directory, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("image directory {} does not exist", dir.display())));
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no images found in {}", dir.display())));
    }
    Ok(files)
}

/// Decodes an image, resizes it to `size × size` (bicubic) and scales it to
/// a (3, size, size) tensor in [-1, 1].
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::CatmullRom)
    } else {
        img
    };
    rgb_to_tensor(&img)
}

pub fn rgb_to_tensor(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planar = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            planar[c * h * w + y as usize * w + x as usize] = p[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(planar, (3, h, w), &Device::Cpu)?)
}

/// Inverse of [`rgb_to_tensor`] for a (3, h, w) tensor; values are clamped.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::dim("image channels", 3, c));
    }
    let v = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let s = v[c * h * w + y as usize * w + x as usize];
            ((s + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
        };
        Rgb([px(0), px(1), px(2)])
    }))
}

pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    tensor_to_rgb(t)?.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Loads a whole directory as a (n, 3, size, size) batch.
pub fn load_dir(dir: &Path, size: usize) -> Result<(Vec<PathBuf>, Tensor)> {
    let files = list_images(dir)?;
    let images = files
        .iter()
        .map(|f| load_image(f, size))
        .collect::<Result<Vec<_>>>()?;
    Ok((files, Tensor::stack(&images, 0)?))
}

fn stream_seed(base: u64, stream: u64, index: u64) -> u64 {
    // splitmix-style mixing so neighbouring epochs get unrelated orders
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// One unpaired training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub a: Tensor,
    pub b: Tensor,
    pub a_paths: Vec<PathBuf>,
    pub b_paths: Vec<PathBuf>,
}

/// Opened unpaired dataset. Epochs run over domain A; domain B is drawn
/// cyclically with its own shuffled order, so the two never pair up.
#[derive(Debug, Clone)]
pub struct UnpairedData {
    spec: UnpairedDataset,
    files_a: Vec<PathBuf>,
    files_b: Vec<PathBuf>,
}

impl UnpairedData {
    pub fn open(spec: &UnpairedDataset) -> Result<Self> {
        if spec.image_size == 0 {
            return Err(Error::Config("data.image_size must be positive".into()));
        }
        Ok(Self {
            spec: spec.clone(),
            files_a: list_images(&spec.domain_a_dir)?,
            files_b: list_images(&spec.domain_b_dir)?,
        })
    }

    pub fn spec(&self) -> &UnpairedDataset {
        &self.spec
    }

    pub fn len_a(&self) -> usize {
        self.files_a.len()
    }

    pub fn len_b(&self) -> usize {
        self.files_b.len()
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.len_a().div_ceil(batch_size.max(1))
    }

    /// (A index, B index, flip A, flip B) for every sample of an epoch.
    pub fn epoch_plan(&self, epoch: u64) -> Vec<(usize, usize, bool, bool)> {
        let seed = self.spec.shuffle_seed;
        let (na, nb) = (self.len_a(), self.len_b());
        let order_a = permutation(na, stream_seed(seed, 1, epoch));
        let mut flips = ChaCha8Rng::seed_from_u64(stream_seed(seed, 3, epoch));
        let mut cache: Option<(u64, Vec<usize>)> = None;
        (0..na)
            .map(|i| {
                let t = epoch * na as u64 + i as u64;
                let (cycle, pos) = (t / nb as u64, (t % nb as u64) as usize);
                if cache.as_ref().map(|c| c.0) != Some(cycle) {
                    cache = Some((cycle, permutation(nb, stream_seed(seed, 2, cycle))));
                }
                let b = cache.as_ref().expect("set above").1[pos];
                let (fa, fb) = (flips.random::<bool>(), flips.random::<bool>());
                (order_a[i], b, self.spec.flip && fa, self.spec.flip && fb)
            })
            .collect()
    }

    fn load(&self, path: &Path, flip: bool) -> Result<Tensor> {
        let t = load_image(path, self.spec.image_size)?;
        Ok(if flip { t.flip(&[2])? } else { t })
    }

    /// Batch `step` of `epoch`; the last batch of an epoch may be short.
    pub fn batch(&self, epoch: u64, step: usize, batch_size: usize) -> Result<Batch> {
        let plan = self.epoch_plan(epoch);
        self.batch_from_plan(&plan, step, batch_size)
    }

    pub fn batch_from_plan(
        &self,
        plan: &[(usize, usize, bool, bool)],
        step: usize,
        batch_size: usize,
    ) -> Result<Batch> {
        let bs = batch_size.max(1);
        let lo = step * bs;
        if lo >= plan.len() {
            return Err(Error::Usage(format!("batch {step} is past the end of the epoch")));
        }
        let rows = &plan[lo..(lo + bs).min(plan.len())];
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut a_paths = Vec::new();
        let mut b_paths = Vec::new();
        for &(ia, ib, fa, fb) in rows {
            a.push(self.load(&self.files_a[ia], fa)?);
            b.push(self.load(&self.files_b[ib], fb)?);
            a_paths.push(self.files_a[ia].clone());
            b_paths.push(self.files_b[ib].clone());
        }
        Ok(Batch {
            a: Tensor::stack(&a, 0)?,
            b: Tensor::stack(&b, 0)?,
            a_paths,
            b_paths,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDomainSpec {
    pub shape_set: Vec<Shape>,
    /// Hue range of domain A in degrees.
    pub palette: (f64, f64),
    /// Hue rotation from domain A to domain B in degrees.
    pub hue_rotation: f64,
    pub size: usize,
    pub n_images: usize,
    pub n_test: usize,
    pub seed: u64,
    pub max_shapes: usize,
}

impl Default for ToyDomainSpec {
    fn default() -> Self {
        Self {
            shape_set: vec![Shape::Circle, Shape::Square, Shape::Triangle],
            palette: (0.0, 90.0),
            hue_rotation: 180.0,
            size: 64,
            n_images: 64,
            n_test: 0,
            seed: 0,
            max_shapes: 2,
        }
    }
}

/// Per-image description written to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyItem {
    pub file: String,
    pub shapes: Vec<(Shape, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyManifest {
    pub spec: ToyDomainSpec,
    pub domains: std::collections::BTreeMap<String, Vec<ToyItem>>,
}

pub const BACKGROUND: [u8; 3] = [128, 128, 128];
const SATURATION: f64 = 0.8;
const VALUE: f64 = 0.9;

/// HSV (degrees, [0,1], [0,1]) to 8-bit RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Hue in degrees of an RGB colour, `None` for greys.
pub fn rgb_hue(p: [u8; 3]) -> Option<f64> {
    let [r, g, b] = p.map(|u| u as f64 / 255.0);
    let max = r.max(g).max(b);
    let d = max - r.min(g).min(b);
    if d < 1e-6 {
        return None;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    Some(h * 60.0)
}

fn inside(shape: Shape, cx: f64, cy: f64, r: f64, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        Shape::Triangle => {
            // upward triangle inscribed in the circle of radius r
            let top = cy - r;
            let base = cy + r * 0.5;
            if y < top || y > base {
                return false;
            }
            let half = (y - top) / (base - top) * r * 0.866;
            dx.abs() <= half
        }
    }
}

fn draw_image(spec: &ToyDomainSpec, rng: &mut ChaCha8Rng, hue_offset: f64) -> (RgbImage, Vec<(Shape, f64)>) {
    let s = spec.size as f64;
    let count = rng.random_range(1..=spec.max_shapes.max(1));
    let mut shapes = Vec::new();
    let mut img = RgbImage::from_pixel(spec.size as u32, spec.size as u32, Rgb(BACKGROUND));
    for _ in 0..count {
        let shape = spec.shape_set[rng.random_range(0..spec.shape_set.len())];
        let r = rng.random_range(0.12..0.25) * s;
        let cx = rng.random_range(r..s - r);
        let cy = rng.random_range(r..s - r);
        let (lo, hi) = spec.palette;
        let hue = if hi > lo { rng.random_range(lo..hi) } else { lo } + hue_offset;
        let color = hsv_to_rgb(hue, SATURATION, VALUE);
        for (x, y, px) in img.enumerate_pixels_mut() {
            // 2×2 supersampling for soft edges
            let mut cover = 0.0;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                if inside(shape, cx, cy, r, x as f64 + ox, y as f64 + oy) {
                    cover += 0.25;
                }
            }
            if cover > 0.0 {
                for c in 0..3 {
                    px[c] = (px[c] as f64 * (1.0 - cover) + color[c] as f64 * cover).round() as u8;
                }
            }
        }
        shapes.push((shape, hue.rem_euclid(360.0)));
    }
    (img, shapes)
}

/// Writes the toy dataset under `root` (trainA/trainB, plus testA/testB
/// when `n_test > 0`) together with `manifest.json`.
pub fn synth_toy(spec: &ToyDomainSpec, root: &Path) -> Result<ToyManifest> {
    if spec.shape_set.is_empty() || spec.size < 8 || spec.n_images == 0 {
        return Err(Error::Config(
            "toy spec needs a shape, size >= 8 and at least one image".into(),
        ));
    }
    let mut domains = std::collections::BTreeMap::new();
    let splits = [
        (TRAIN_A, 0.0, spec.n_images, 0u64),
        (TRAIN_B, spec.hue_rotation, spec.n_images, 1),
        (TEST_A, 0.0, spec.n_test, 2),
        (TEST_B, spec.hue_rotation, spec.n_test, 3),
    ];
    for (name, offset, n, stream) in splits {
        if n == 0 {
            continue;
        }
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, 10 + stream, 0));
        let mut items = Vec::new();
        for i in 0..n {
            let (img, shapes) = draw_image(spec, &mut rng, offset);
            let file = format!("{i:05}.png");
            let path = dir.join(&file);
            img.save(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?;
            items.push(ToyItem { file, shapes });
        }
        domains.insert(name.to_string(), items);
    }
    let manifest = ToyManifest {
        spec: spec.clone(),
        domains,
    };
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
