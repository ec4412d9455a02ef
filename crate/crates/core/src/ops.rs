//! Tensor primitives shared by the networks.
//!
//! Convolutions run as banded im2col + gemm in the forward pass and as
//! im2col/col2im products in the backward pass; candle's stock CPU
//! transposed convolution (used by its conv backward) is an order of
//! magnitude slower than its gemm path.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Shape, Tensor, WithDType, D};

use crate::error::{Error, Result};

/// Border handling for convolution windows that overhang the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zeros,
    Reflect,
}

#[derive(Debug, Clone, Copy)]
struct Window {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    pad: usize,
    stride: usize,
    mode: Padding,
}

impl Window {
    fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    #[inline]
    fn source(&self, i: isize, n: usize) -> Option<usize> {
        if i >= 0 && (i as usize) < n {
            return Some(i as usize);
        }
        match self.mode {
            Padding::Zeros => None,
            Padding::Reflect => {
                let n = n as isize;
                let r = if i < 0 { -i } else { 2 * (n - 1) - i };
                Some(r as usize)
            }
        }
    }

    /// Visits every (column row, column position, source offset) triple.
    /// Column matrix layout: rows `c * k * k`, columns `batch * out_h * out_w`.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let ncols = self.batch * oh * ow;
        let kk = self.kernel * self.kernel;
        // Precompute source coordinates per kernel offset.
        let ys: Vec<Vec<Option<usize>>> = (0..self.kernel)
            .map(|ky| {
                (0..oh)
                    .map(|oy| {
                        self.source(
                            (oy * self.stride + ky) as isize - self.pad as isize,
                            self.height,
                        )
                    })
                    .collect()
            })
            .collect();
        let xs: Vec<Vec<Option<usize>>> = (0..self.kernel)
            .map(|kx| {
                (0..ow)
                    .map(|ox| {
                        self.source(
                            (ox * self.stride + kx) as isize - self.pad as isize,
                            self.width,
                        )
                    })
                    .collect()
            })
            .collect();
        for c in 0..self.channels {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = c * kk + ky * self.kernel + kx;
                    for b in 0..self.batch {
                        let plane = (b * self.channels + c) * self.height * self.width;
                        let col0 = row * ncols + b * oh * ow;
                        for (oy, sy) in ys[ky].iter().enumerate() {
                            let Some(sy) = sy else { continue };
                            let base = plane + sy * self.width;
                            for (ox, sx) in xs[kx].iter().enumerate() {
                                if let Some(sx) = sx {
                                    f(col0 + oy * ow + ox, base + sx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn cols_shape(&self) -> Shape {
        Shape::from((
            self.channels * self.kernel * self.kernel,
            self.batch * self.out_h() * self.out_w(),
        ))
    }

    fn image_shape(&self) -> Shape {
        Shape::from((self.batch, self.channels, self.height, self.width))
    }
}

struct Im2Col(Window);
struct Col2Im(Window);

/// Writes the column block for batch item `b`, output rows `y0..y1` into
/// `dst` (row stride `ld`, starting at column `col_off`). Entries that fall
/// into zero padding are left untouched.
#[allow(clippy::too_many_arguments)]
fn fill_cols<T: WithDType>(
    w: &Window,
    src: &[T],
    b: usize,
    y0: usize,
    y1: usize,
    dst: &mut [T],
    ld: usize,
    col_off: usize,
) {
    let ow = w.out_w();
    let k = w.kernel;
    let xs: Vec<Vec<Option<usize>>> = (0..k)
        .map(|kx| {
            (0..ow)
                .map(|o| w.source((o * w.stride + kx) as isize - w.pad as isize, w.width))
                .collect()
        })
        .collect();
    let plane_len = w.height * w.width;
    for c in 0..w.channels {
        let plane = &src[(b * w.channels + c) * plane_len..(b * w.channels + c + 1) * plane_len];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                // in-bounds output columns for stride 1 map to a contiguous run
                let (lo, hi) = if w.stride == 1 {
                    let lo = w.pad.saturating_sub(kx).min(ow);
                    (lo, (w.width + w.pad).saturating_sub(kx).clamp(lo, ow))
                } else {
                    (0, 0)
                };
                for oy in y0..y1 {
                    let Some(sy) = w.source((oy * w.stride + ky) as isize - w.pad as isize, w.height)
                    else {
                        continue;
                    };
                    let srow = &plane[sy * w.width..(sy + 1) * w.width];
                    let start = row * ld + col_off + (oy - y0) * ow;
                    let drow = &mut dst[start..start + ow];
                    if hi > lo {
                        let s0 = lo + kx - w.pad;
                        drow[lo..hi].copy_from_slice(&srow[s0..s0 + hi - lo]);
                    }
                    for ox in (0..lo).chain(hi..ow) {
                        if let Some(sx) = xs[kx][ox] {
                            drow[ox] = srow[sx];
                        }
                    }
                }
            }
        }
    }
}

fn im2col_impl<T: WithDType>(w: &Window, src: &[T]) -> Vec<T> {
    let (oh, ow) = (w.out_h(), w.out_w());
    let ncols = w.batch * oh * ow;
    let mut dst = vec![T::zero(); w.cols_shape().elem_count()];
    for b in 0..w.batch {
        fill_cols(w, src, b, 0, oh, &mut dst, ncols, b * oh * ow);
    }
    dst
}

/// Column-matrix elements built per band in the fused forward.
const BAND_ELEMS: usize = 1 << 20;

/// Convolution forward as banded im2col + gemm, never materializing the
/// whole column matrix. Output layout is (out_c, batch · oh · ow).
fn conv_forward_impl<T: WithDType>(
    w: &Window,
    src: &[T],
    weight: &[T],
    out_c: usize,
) -> candle_core::Result<Vec<T>> {
    let (oh, ow) = (w.out_h(), w.out_w());
    let ncols = w.batch * oh * ow;
    let rows = w.channels * w.kernel * w.kernel;
    let weight = Tensor::from_slice(weight, (out_c, rows), &Device::Cpu)?;
    let band = (BAND_ELEMS / (rows * ow).max(1)).clamp(1, oh);
    let mut out = vec![T::zero(); out_c * ncols];
    let mut buf = vec![T::zero(); rows * band * ow];
    for b in 0..w.batch {
        let mut y0 = 0;
        while y0 < oh {
            let y1 = (y0 + band).min(oh);
            let n = (y1 - y0) * ow;
            let cols = &mut buf[..rows * n];
            cols.fill(T::zero());
            fill_cols(w, src, b, y0, y1, cols, n, 0);
            let y = weight.matmul(&Tensor::from_slice(cols, (rows, n), &Device::Cpu)?)?;
            let y = y.flatten_all()?.to_vec1::<T>()?;
            for o in 0..out_c {
                let at = o * ncols + b * oh * ow + y0 * ow;
                out[at..at + n].copy_from_slice(&y[o * n..(o + 1) * n]);
            }
            y0 = y1;
        }
    }
    Ok(out)
}

fn col2im_impl<T: WithDType>(w: &Window, src: &[T]) -> Vec<T> {
    let mut dst = vec![T::zero(); w.image_shape().elem_count()];
    w.for_each(|d, s| dst[s] += src[d]);
    dst
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("expected a contiguous layout"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_impl(&self.0, contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_impl(&self.0, contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("im2col supports f32/f64 only"),
        };
        Ok((out, self.0.cols_shape()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(
            grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?,
        ))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_impl(&self.0, contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_impl(&self.0, contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("col2im supports f32/f64 only"),
        };
        Ok((out, self.0.image_shape()))
    }
}

/// Fused convolution on (input, weight reshaped to (out_c, c·k·k)).
struct ConvOp(Window);

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d-im2col"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out_c = l2.dims()[0];
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => CpuStorage::F32(conv_forward_impl(
                &self.0,
                contiguous_slice(x, l1)?,
                contiguous_slice(w, l2)?,
                out_c,
            )?),
            (CpuStorage::F64(x), CpuStorage::F64(w)) => CpuStorage::F64(conv_forward_impl(
                &self.0,
                contiguous_slice(x, l1)?,
                contiguous_slice(w, l2)?,
                out_c,
            )?),
            _ => candle_core::bail!("conv2d supports matching f32/f64 operands only"),
        };
        let (oh, ow) = (self.0.out_h(), self.0.out_w());
        Ok((out, Shape::from((out_c, self.0.batch * oh * ow))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        weight: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = grad_res.contiguous()?;
        let grad_w = if weight.track_op() {
            let cols = x.apply_op1_no_bwd(&Im2Col(self.0))?;
            Some(g.matmul(&cols.t()?)?)
        } else {
            None
        };
        let grad_x = if x.track_op() {
            let cols = weight.t()?.matmul(&g)?;
            Some(cols.apply_op1_no_bwd(&Col2Im(self.0))?)
        } else {
            None
        };
        Ok((grad_x, grad_w))
    }
}

/// Output spatial extent of a convolution window along one axis.
pub fn conv_out_size(input: usize, kernel: usize, pad: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// 2-d convolution of `x` (b, c, h, w) with `weight` (o, c, k, k).
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    pad: usize,
    stride: usize,
    mode: Padding,
) -> Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (out_c, in_c, kernel, kernel_w) = weight.dims4()?;
    if in_c != channels || kernel != kernel_w {
        return Err(Error::dim(
            "conv2d input channels",
            (in_c, kernel, kernel),
            (channels, kernel, kernel_w),
        ));
    }
    if mode == Padding::Reflect && (pad >= height || pad >= width) {
        return Err(Error::dim("reflection padding", format!("pad < {height}x{width}"), pad));
    }
    let (Some(oh), Some(ow)) = (
        conv_out_size(height, kernel, pad, stride),
        conv_out_size(width, kernel, pad, stride),
    ) else {
        return Err(Error::dim(
            "conv2d spatial size",
            format!(">= kernel {kernel} after padding {pad}"),
            (height, width),
        ));
    };
    let window = Window {
        batch,
        channels,
        height,
        width,
        kernel,
        pad,
        stride,
        mode,
    };
    let w = weight.reshape((out_c, in_c * kernel * kernel))?.contiguous()?;
    let mut y = x.contiguous()?.apply_op2(&w, ConvOp(window))?;
    if let Some(b) = bias {
        y = y.broadcast_add(&b.reshape((out_c, 1))?)?;
    }
    if batch == 1 {
        return Ok(y.reshape((1, out_c, oh, ow))?);
    }
    if batch == 1 {
        return Ok(y.reshape((1, out_c, oh, ow))?);
    }
    Ok(y
        .reshape((out_c, batch, oh, ow))?
        .transpose(0, 1)?
        .contiguous()?)
}

/// Per-sample, per-channel normalization over the spatial axes (no affine).
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + EPS)?.sqrt()?)?;
    Ok(normed.reshape((b, c, h, w))?)
}

/// Layer normalization over the last axis with learned scale and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Anti-aliased stride-2 downsampling: a fixed [1 2 1]ᵀ[1 2 1]/16 blur
/// applied depthwise with reflection padding.
pub fn blur_downsample(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let taps = [1f64, 2., 1.];
    let filt: Vec<f64> = taps
        .iter()
        .flat_map(|a| taps.iter().map(move |b| a * b / 16.0))
        .collect();
    let filt = Tensor::from_vec(filt, (1, 1, 3, 3), x.device())?.to_dtype(x.dtype())?;
    let planes = x.reshape((b * c, 1, h, w))?;
    let y = conv2d(&planes, &filt, None, 1, 2, Padding::Reflect)?;
    let (_, _, oh, ow) = y.dims4()?;
    Ok(y.reshape((b, c, oh, ow))?)
}

/// Output size of [`blur_downsample`] along one axis.
pub fn blur_out_size(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

/// Nearest-neighbour ×2 upsampling built from broadcast so the backward
/// pass is a plain reduction.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Half-pixel-centred bilinear interpolation weights for resampling an axis
/// of length `input` to length `output`: for each output index, the two
/// source indices and the weight on the second one.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Dense (output × input) bilinear resampling matrix for one axis.
pub fn bilinear_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    for (i, (i0, i1, t)) in bilinear_taps(input, output).into_iter().enumerate() {
        m[i * input + i0] += 1.0 - t;
        m[i * input + i1] += t;
    }
    m
}

/// Differentiable bilinear resize of a (b, c, h, w) tensor, expressed as
/// two matrix products so gradients flow through candle's matmul.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dtype = x.dtype();
    let rw = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?.to_dtype(dtype)?;
    let rh = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(dtype)?;
    // (b*c*h, w) x (w, out_w)
    let y = x
        .reshape((b * c * h, w))?
        .matmul(&rw.t()?)?
        .reshape((b * c, h, out_w))?;
    // (out_h, h) x (h, out_w) per plane
    let y = rh.broadcast_left(b * c)?.contiguous()?.matmul(&y)?;
    Ok(y.reshape((b, c, out_h, out_w))?)
}

/// Bilinear resize of a single row-major (h, w) grid.
pub fn resize_grid(grid: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(grid.len(), h * w, "grid length must equal h*w");
    if (h, w) == (out_h, out_w) {
        return grid.to_vec();
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let v = |y: usize, x: usize| grid[y * w + x] as f64;
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn conv_matches_candle_zero_padding() -> Result<()> {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (2, 3, 9, 7), &dev)?;
        let w = Tensor::randn(0f32, 1.0, (4, 3, 3, 3), &dev)?;
        for stride in [1, 2] {
            let ours = conv2d(&x, &w, None, 1, stride, Padding::Zeros)?;
            let theirs = x.conv2d(&w, 1, stride, 1, 1)?;
            assert_eq!(ours.dims(), theirs.dims());
            let a = ours.flatten_all()?.to_vec1::<f32>()?;
            let b = theirs.flatten_all()?.to_vec1::<f32>()?;
            assert!(close(&a, &b, 1e-4));
        }
        Ok(())
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() -> Result<()> {
        let dev = Device::Cpu;
        // 1x1 identity kernel with pad 2 would drop the border, so use a
        // 5x5 kernel that picks the top-left corner of each window.
        let x = Tensor::from_vec((0..5).map(|v| v as f32).collect::<Vec<_>>(), (1, 1, 1, 5), &dev)?;
        let x = x.broadcast_as((1, 1, 3, 5))?.contiguous()?;
        let mut k = vec![0f32; 9];
        k[3] = 1.0; // middle row, left column
        let k = Tensor::from_vec(k, (1, 1, 3, 3), &dev)?;
        let y = conv2d(&x, &k, None, 1, 1, Padding::Reflect)?;
        let row = y.get(0)?.get(0)?.get(1)?.to_vec1::<f32>()?;
        // left neighbour of column 0 reflects to column 1
        assert_eq!(row, vec![1.0, 0.0, 1.0, 2.0, 3.0]);
        Ok(())
    }

    #[test]
    fn conv_gradients_match_finite_differences() -> Result<()> {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (1, 2, 5, 5), &dev)?)?;
        let w = Var::from_tensor(&Tensor::randn(0f64, 1.0, (3, 2, 3, 3), &dev)?)?;
        let f = |x: &Tensor, w: &Tensor| -> Result<Tensor> {
            Ok(conv2d(x, w, None, 1, 2, Padding::Reflect)?.sqr()?.sum_all()?)
        };
        let grads = f(x.as_tensor(), w.as_tensor())?.backward()?;
        let gx = grads.get(&x).unwrap().flatten_all()?.to_vec1::<f64>()?;
        let base = x.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let h = 1e-6;
        for i in [0usize, 7, 13, 24, 31, 49] {
            let mut p = base.clone();
            p[i] += h;
            let fp = scalar(&f(&Tensor::from_vec(p.clone(), (1, 2, 5, 5), &dev)?, w.as_tensor())?)?;
            p[i] -= 2.0 * h;
            let fm = scalar(&f(&Tensor::from_vec(p, (1, 2, 5, 5), &dev)?, w.as_tensor())?)?;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - gx[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "{i}: {fd} vs {}", gx[i]);
        }
        Ok(())
    }

    #[test]
    fn blur_downsample_shapes_and_constants() -> Result<()> {
        let dev = Device::Cpu;
        for n in [256usize, 255, 127, 63, 8] {
            assert_eq!(blur_out_size(n), (n + 1) / 2);
        }
        let x = Tensor::full(0.7f32, (1, 2, 9, 9), &dev)?;
        let y = blur_downsample(&x)?;
        assert_eq!(y.dims(), &[1, 2, 5, 5]);
        let v = y.flatten_all()?.to_vec1::<f32>()?;
        assert!(v.iter().all(|a| (a - 0.7).abs() < 1e-6));
        Ok(())
    }

    #[test]
    fn nearest_upsample_repeats_and_backprops() -> Result<()> {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::new(&[[[[1f32, 2.], [3., 4.]]]], &dev)?)?;
        let y = upsample_nearest2x(x.as_tensor())?;
        assert_eq!(
            y.flatten_all()?.to_vec1::<f32>()?,
            vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let g = y.sum_all()?.backward()?;
        let gx = g.get(&x).unwrap().flatten_all()?.to_vec1::<f32>()?;
        assert_eq!(gx, vec![4.0; 4]);
        Ok(())
    }

    #[test]
    fn bilinear_grid_closed_form() {
        let grid = [0f32, 1., 0., 1.];
        let up = resize_grid(&grid, 2, 2, 4, 4);
        for row in up.chunks(4) {
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
        assert_eq!(resize_grid(&grid, 2, 2, 2, 2), grid.to_vec());
    }

    #[test]
    fn tensor_resize_agrees_with_grid_resize() -> Result<()> {
        let dev = Device::Cpu;
        let grid: Vec<f32> = (0..30).map(|i| (i as f32 * 0.37).sin()).collect();
        let t = Tensor::from_vec(grid.clone(), (1, 1, 5, 6), &dev)?;
        let a = resize_bilinear(&t, 8, 3)?.flatten_all()?.to_vec1::<f32>()?;
        let b = resize_grid(&grid, 5, 6, 8, 3);
        assert!(close(&a, &b, 1e-5));
        Ok(())
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() -> Result<()> {
        let dev = Device::Cpu;
        let x = (Tensor::randn(0f32, 3.0, (2, 3, 8, 8), &dev)? + 5.0)?;
        let y = instance_norm(&x)?.reshape((6, 64))?;
        let mean = y.mean_keepdim(1)?.flatten_all()?.to_vec1::<f32>()?;
        let var = y.sqr()?.mean_keepdim(1)?.flatten_all()?.to_vec1::<f32>()?;
        assert!(mean.iter().all(|m| m.abs() < 1e-5));
        assert!(var.iter().all(|v| (v - 1.0).abs() < 1e-3));
        Ok(())
    }
}
