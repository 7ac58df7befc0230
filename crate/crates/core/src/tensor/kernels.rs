//! Forward and backward kernels shared by [`Tensor`] methods and the tape.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Validated shapes for one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new<T: Real>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (c_in, h, w) = input.dims3()?;
        let [c_out, wc_in, k, k2] = *weight.shape() else {
            return Err(Error::invalid(format!(
                "conv weight must be [C_out,C_in,K,K], got {:?}",
                weight.shape()
            )));
        };
        if k != k2 {
            return Err(Error::invalid(format!("non-square kernel {k}x{k2}")));
        }
        if wc_in != c_in {
            return Err(Error::invalid(format!(
                "conv weight expects {wc_in} input channels, input has {c_in}"
            )));
        }
        if let Some(b) = bias {
            if b.len() != c_out {
                return Err(Error::invalid(format!(
                    "bias of length {} for {c_out} output channels",
                    b.len()
                )));
            }
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride must be positive"));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::invalid(format!(
                "kernel {k} larger than padded input {h}x{w} (padding {padding})"
            )));
        }
        let h_out = (h + 2 * padding - k) / stride + 1;
        let w_out = (w + 2 * padding - k) / stride + 1;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            h_out,
            w_out,
        })
    }

    /// Padding that keeps the spatial size at stride 1; only defined for odd kernels.
    pub fn same_padding(k: usize) -> Result<usize> {
        if k.is_multiple_of(2) {
            return Err(Error::invalid(format!("same padding needs an odd kernel, got {k}")));
        }
        Ok((k - 1) / 2)
    }

    /// Input index read by output index `o` at kernel offset `k`, if inside.
    fn source_index(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.padding).filter(|&i| i < len)
    }

    /// Output columns `lo..hi` whose kernel offset `k` lands inside the input row.
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(k).div_ceil(self.stride);
        let hi = if len + self.padding > k {
            ((len + self.padding - k - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unrolls input patches into a `[C_in*K*K, H_out*W_out]` matrix.
///
/// Row order is channel-major, then kernel row, then kernel column, which is
/// the same bijection used when folding weights into matrices.
fn im2col<T: Real>(g: &ConvGeometry, x: &[T]) -> Vec<T> {
    let p = g.out_len();
    let mut cols = vec![T::ZERO; g.patch_len() * p];
    for m in 0..g.c_in {
        let plane = &x[m * g.h * g.w..(m + 1) * g.h * g.w];
        for k1 in 0..g.k {
            for k2 in 0..g.k {
                let row = (m * g.k + k1) * g.k + k2;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_range(k2, g.w, g.w_out);
                for oy in 0..g.h_out {
                    let Some(iy) = g.source_index(oy, k1, g.h) else { continue };
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * g.stride + k2 - g.padding;
                    if g.stride == 1 {
                        dst_row[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                    } else {
                        for (d, &v) in dst_row[lo..hi].iter_mut().zip(src_row[start..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(g: &ConvGeometry, cols: &[T]) -> Vec<T> {
    let p = g.out_len();
    let mut x = vec![T::ZERO; g.c_in * g.h * g.w];
    for m in 0..g.c_in {
        let plane = &mut x[m * g.h * g.w..(m + 1) * g.h * g.w];
        for k1 in 0..g.k {
            for k2 in 0..g.k {
                let row = (m * g.k + k1) * g.k + k2;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_range(k2, g.w, g.w_out);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.h_out {
                    let Some(iy) = g.source_index(oy, k1, g.h) else { continue };
                    let start = lo * g.stride + k2 - g.padding;
                    let dst_row = &mut plane[iy * g.w + start..(iy + 1) * g.w];
                    let src_row = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst_row.iter_mut().zip(src_row) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst_row.iter_mut().step_by(g.stride).zip(src_row) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation with symmetric zero padding: output `(n, j1, j2)` sums
/// `w[n, m, k1, k2] * x[m, j1*s + k1 - p, j2*s + k2 - p]`, with out-of-range
/// input positions contributing zero.
pub fn conv2d_forward<T: Real>(
    g: &ConvGeometry,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let p = g.out_len();
    let kk = g.patch_len();
    let mut out = vec![T::ZERO; g.c_out * p];
    if let Some(b) = bias {
        for (c, chunk) in out.chunks_mut(p).enumerate() {
            chunk.fill(b.data()[c]);
        }
    }
    let beta = if bias.is_some() { T::ONE } else { T::ZERO };
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        input.data()
    } else {
        owned = im2col(g, input.data());
        &owned
    };
    T::gemm(
        g.c_out,
        kk,
        p,
        T::ONE,
        weight.data(),
        kk as isize,
        1,
        cols,
        p as isize,
        1,
        beta,
        &mut out,
        p as isize,
        1,
    );
    Tensor::from_parts(vec![g.c_out, g.h_out, g.w_out], out)
}

pub struct ConvGrads<T: Real> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let p = g.out_len();
    let kk = g.patch_len();

    let weight_grad = need_weight.then(|| {
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            input
        } else {
            owned = im2col(g, input);
            &owned
        };
        let mut gw = vec![T::ZERO; g.c_out * kk];
        T::gemm(
            g.c_out,
            p,
            kk,
            T::ONE,
            grad_out,
            p as isize,
            1,
            cols,
            1,
            p as isize,
            T::ZERO,
            &mut gw,
            kk as isize,
            1,
        );
        gw
    });

    let bias_grad = need_bias.then(|| {
        grad_out
            .chunks(p)
            .map(|c| c.iter().copied().sum())
            .collect()
    });

    let input_grad = need_input.then(|| {
        let mut gcols = vec![T::ZERO; kk * p];
        T::gemm(
            kk,
            g.c_out,
            p,
            T::ONE,
            weight,
            1,
            kk as isize,
            grad_out,
            p as isize,
            1,
            T::ZERO,
            &mut gcols,
            p as isize,
            1,
        );
        if g.is_pointwise() {
            gcols
        } else {
            col2im(g, &gcols)
        }
    });

    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// Source taps for 2x bilinear upsampling with half-pixel centers.
fn upsample_taps<T: Real>(n: usize) -> Vec<(usize, usize, T)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, T::from_f64(src - i0 as f64))
        })
        .collect()
}

pub fn upsample2x_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Tensor<T> {
    let ty = upsample_taps::<T>(h);
    let tx = upsample_taps::<T>(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::ZERO; c * ho * wo];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * lx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * lx;
                dst[oy * wo + ox] = top + (bot - top) * ly;
            }
        }
    }
    Tensor::from_parts(vec![c, ho, wo], out)
}

pub fn upsample2x_backward<T: Real>(grad_out: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let ty = upsample_taps::<T>(h);
    let tx = upsample_taps::<T>(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut gx = vec![T::ZERO; c * h * w];
    for ch in 0..c {
        let g = &grad_out[ch * ho * wo..(ch + 1) * ho * wo];
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = g[oy * wo + ox];
                let top = v * (T::ONE - ly);
                let bot = v * ly;
                dst[y0 * w + x0] += top * (T::ONE - lx);
                dst[y0 * w + x1] += top * lx;
                dst[y1 * w + x0] += bot * (T::ONE - lx);
                dst[y1 * w + x1] += bot * lx;
            }
        }
    }
    gx
}

pub fn check_groups(channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::invalid(format!(
            "{channels} channels not divisible into {groups} groups"
        )));
    }
    Ok(())
}

/// Returns the normalized tensor and the per-group reciprocal standard deviations.
pub fn group_norm_forward<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    groups: usize,
    eps: T,
) -> (Tensor<T>, Vec<T>) {
    let n = c / groups * h * w;
    let inv_n = T::ONE / T::from_usize(n);
    let mut out = vec![T::ZERO; x.len()];
    let mut rstds = Vec::with_capacity(groups);
    for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let mean = src.iter().copied().sum::<T>() * inv_n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rstd = T::ONE / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * rstd;
        }
        rstds.push(rstd);
    }
    (Tensor::from_parts(vec![c, h, w], out), rstds)
}

pub fn group_norm_backward<T: Real>(normalized: &[T], rstds: &[T], grad_out: &[T]) -> Vec<T> {
    let n = normalized.len() / rstds.len();
    let inv_n = T::ONE / T::from_usize(n);
    let mut gx = vec![T::ZERO; normalized.len()];
    for ((xh, g), (dst, &rstd)) in normalized
        .chunks(n)
        .zip(grad_out.chunks(n))
        .zip(gx.chunks_mut(n).zip(rstds))
    {
        let sum_g: T = g.iter().copied().sum();
        let sum_gx: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        for ((d, &gi), &xi) in dst.iter_mut().zip(g).zip(xh) {
            *d = rstd * (gi - sum_g * inv_n - xi * sum_gx * inv_n);
        }
    }
    gx
}
