//! Hue-invariant edge maps for checking that translation keeps structure.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Sobel gradient magnitude of the value channel (max over RGB, mapped to
/// [0, 1]) with edge-replicated borders. Returns one row-major map per image.
pub fn edge_maps(images: &Tensor) -> Result<Vec<Vec<f32>>> {
    let (n, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::dim("image channels", 3, c));
    }
    let v = images.to_dtype(DType::F32)?.max_keepdim(1)?;
    let v = ((v + 1.0)? * 0.5)?.flatten_from(1)?.to_vec2::<f32>()?;
    let mut out = Vec::with_capacity(n);
    for img in v {
        let at = |y: isize, x: isize| {
            let yy = y.clamp(0, h as isize - 1) as usize;
            let xx = x.clamp(0, w as isize - 1) as usize;
            img[yy * w + xx]
        };
        let mut e = vec![0f32; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                    - at(y - 1, x - 1)
                    - 2.0 * at(y, x - 1)
                    - at(y + 1, x - 1);
                let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                    - at(y - 1, x - 1)
                    - 2.0 * at(y - 1, x)
                    - at(y - 1, x + 1);
                e[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
            }
        }
        out.push(e);
    }
    Ok(out)
}

/// Mean absolute difference between the edge maps of two image batches.
pub fn edge_l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::dim("edge comparison", a.dims(), b.dims()));
    }
    let (ea, eb) = (edge_maps(a)?, edge_maps(b)?);
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (x, y) in ea.iter().zip(&eb) {
        sum += x.iter().zip(y).map(|(p, q)| (p - q).abs() as f64).sum::<f64>();
        count += x.len();
    }
    Ok(sum / count.max(1) as f64)
}
