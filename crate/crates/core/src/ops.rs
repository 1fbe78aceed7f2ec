//! Forward and adjoint kernels on raw tensors.
//!
//! These are the numeric building blocks behind [`crate::graph::Graph`]. Each
//! differentiable kernel comes with a `*_backward` companion computing the
//! vector-Jacobian product for an upstream gradient.

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

/// Spatial padding policy of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on each side (odd kernels only).
    Same,
    Valid,
}

/// Interpolation used by [`upsample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_y: usize,
    pub pad_x: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let (c_in, h, w) = match input {
            &[c, h, w] => (c, h, w),
            s => return shape_err(format!("conv2d input must be [C,H,W], got {:?}", s)),
        };
        let (c_out, kc, kh, kw) = match kernel {
            &[o, c, kh, kw] => (o, c, kh, kw),
            s => return shape_err(format!("conv2d kernel must be [Cout,Cin,kh,kw], got {:?}", s)),
        };
        if kc != c_in {
            return shape_err(format!(
                "conv2d kernel expects {} input channels but input has {}",
                kc, c_in
            ));
        }
        if stride == 0 {
            return arg_err("conv2d stride must be at least 1");
        }
        if kh == 0 || kw == 0 {
            return shape_err("conv2d kernel has an empty spatial extent");
        }
        let (pad_y, pad_x) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return arg_err(format!("same padding needs odd kernels, got {}x{}", kh, kw));
                }
                (kh / 2, kw / 2)
            }
            Padding::Valid => (0, 0),
        };
        if h + 2 * pad_y < kh || w + 2 * pad_x < kw {
            return shape_err(format!("conv2d kernel {}x{} larger than input {}x{}", kh, kw, h, w));
        }
        let oh = (h + 2 * pad_y - kh) / stride + 1;
        let ow = (w + 2 * pad_x - kw) / stride + 1;
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad_y,
            pad_x,
            oh,
            ow,
        })
    }

    /// Output columns `ox` for which `ox * stride + kx - pad_x` is a valid input column.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad_x > kx {
            (self.pad_x - kx).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.w + self.pad_x > kx {
            ((self.w - 1 + self.pad_x - kx) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad_y as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Unfold the input into a `[C_in*kh*kw, oh*ow]` row-major patch matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let plane_out = self.oh * self.ow;
        let mut cols = vec![0.0; self.patch_len() * plane_out];
        for ci in 0..self.c_in {
            let in_plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let row = &mut cols[r * plane_out..(r + 1) * plane_out];
                    let (lo, hi) = self.ox_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.oh {
                        let Some(iy) = self.input_row(oy, ky) else { continue };
                        let src = &in_plane[iy * self.w..(iy + 1) * self.w];
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        if self.stride == 1 {
                            let off = lo + kx - self.pad_x;
                            dst[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                dst[ox] = src[ox * self.stride + kx - self.pad_x];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`]: scatter-add patch gradients into the input.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let plane_out = self.oh * self.ow;
        let mut x = vec![0.0; self.c_in * self.h * self.w];
        for ci in 0..self.c_in {
            let in_plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let row = &cols[r * plane_out..(r + 1) * plane_out];
                    let (lo, hi) = self.ox_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.oh {
                        let Some(iy) = self.input_row(oy, ky) else { continue };
                        let dst = &mut in_plane[iy * self.w..(iy + 1) * self.w];
                        let src = &row[oy * self.ow..(oy + 1) * self.ow];
                        if self.stride == 1 {
                            let off = lo + kx - self.pad_x;
                            for (d, v) in dst[off..off + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for ox in lo..hi {
                                dst[ox * self.stride + kx - self.pad_x] += src[ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return shape_err(format!("bias has {} entries for {} output channels", b.len(), g.c_out));
        }
    }
    let cols = g.im2col(input.values());
    let k = kernel.values();
    let (plane_out, patch) = (g.oh * g.ow, g.patch_len());
    let mut out = vec![0.0; g.c_out * plane_out];
    for co in 0..g.c_out {
        let out_row = &mut out[co * plane_out..(co + 1) * plane_out];
        if let Some(b) = bias {
            out_row.fill(b.values()[co]);
        }
        for (r, &wv) in k[co * patch..(co + 1) * patch].iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            for (o, c) in out_row.iter_mut().zip(&cols[r * plane_out..(r + 1) * plane_out]) {
                *o += wv * c;
            }
        }
    }
    Tensor::new(vec![g.c_out, g.oh, g.ow], out)
}

/// Gradients of a convolution with respect to its input, kernel and bias.
pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Dot product with four independent partial sums (lets the loop vectorize).
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
    grad_out: &[f64],
    need_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let k = kernel.values();
    let (plane_out, patch) = (g.oh * g.ow, g.patch_len());
    if grad_out.len() != g.c_out * plane_out {
        return shape_err(format!("conv2d upstream gradient has {} entries, expected {}", grad_out.len(), g.c_out * plane_out));
    }
    let cols = g.im2col(input.values());
    let mut gk = vec![0.0; k.len()];
    let mut gcols = need_input.then(|| vec![0.0; cols.len()]);
    let gb: Vec<f64> = (0..g.c_out)
        .map(|co| grad_out[co * plane_out..(co + 1) * plane_out].iter().sum())
        .collect();
    for co in 0..g.c_out {
        let go = &grad_out[co * plane_out..(co + 1) * plane_out];
        if go.iter().all(|&v| v == 0.0) {
            continue;
        }
        for r in 0..patch {
            let col = &cols[r * plane_out..(r + 1) * plane_out];
            gk[co * patch + r] = dot(go, col);
            if let Some(gc) = gcols.as_mut() {
                let wv = k[co * patch + r];
                for (d, v) in gc[r * plane_out..(r + 1) * plane_out].iter_mut().zip(go) {
                    *d += wv * v;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gcols.map(|gc| g.col2im(&gc)),
        kernel: gk,
        bias: gb,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    input
        .values()
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

fn bilinear_taps(dst: usize, factor: usize, src_len: usize) -> (usize, usize, f64) {
    let pos = ((dst as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
    let i0 = (pos.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    let frac = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
    (i0, i1, frac)
}

pub fn upsample(input: &Tensor, factor: usize, mode: UpsampleMode) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if factor == 0 {
        return arg_err("upsample factor must be at least 1");
    }
    let (oh, ow) = (h * factor, w * factor);
    let x = input.values();
    let mut out = vec![0.0; c * oh * ow];
    match mode {
        UpsampleMode::Nearest => {
            for ch in 0..c {
                for oy in 0..oh {
                    let src = &x[(ch * h + oy / factor) * w..(ch * h + oy / factor + 1) * w];
                    let dst = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        *d = src[ox / factor];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                for oy in 0..oh {
                    let (y0, y1, fy) = bilinear_taps(oy, factor, h);
                    for ox in 0..ow {
                        let (x0, x1, fx) = bilinear_taps(ox, factor, w);
                        let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                        let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                        out[(ch * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn upsample_backward(
    in_shape: &[usize],
    factor: usize,
    mode: UpsampleMode,
    grad_out: &[f64],
) -> Vec<f64> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h * factor, w * factor);
    let mut gi = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(ch * oh + oy) * ow + ox];
                match mode {
                    UpsampleMode::Nearest => {
                        gi[(ch * h + oy / factor) * w + ox / factor] += g;
                    }
                    UpsampleMode::Bilinear => {
                        let (y0, y1, fy) = bilinear_taps(oy, factor, h);
                        let (x0, x1, fx) = bilinear_taps(ox, factor, w);
                        let base = ch * h * w;
                        gi[base + y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                        gi[base + y0 * w + x1] += g * (1.0 - fy) * fx;
                        gi[base + y1 * w + x0] += g * fy * (1.0 - fx);
                        gi[base + y1 * w + x1] += g * fy * fx;
                    }
                }
            }
        }
    }
    gi
}

pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| crate::Error::InvalidArgument("concat of zero tensors".into()))?;
    let (_, h, w) = first.chw()?;
    let mut channels = 0;
    for t in inputs {
        let (c, th, tw) = t.chw()?;
        if (th, tw) != (h, w) {
            return shape_err(format!("concat spatial mismatch: {}x{} vs {}x{}", th, tw, h, w));
        }
        channels += c;
    }
    let mut out = Vec::with_capacity(channels * h * w);
    for t in inputs {
        out.extend_from_slice(t.values());
    }
    Tensor::new(vec![channels, h, w], out)
}

/// Normalized, truncated 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return arg_err(format!("gaussian sigma must be positive, got {}", sigma));
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Edge-inclusive reflection (`d c b a | a b c d | d c b a`), valid for any offset.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn blur_pass(src: &[f64], dst: &mut [f64], c: usize, h: usize, w: usize, taps: &[f64], horizontal: bool) {
    let r = (taps.len() / 2) as isize;
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let off = k as isize - r;
                    let idx = if horizontal {
                        y * w + reflect_index(x as isize + off, w)
                    } else {
                        reflect_index(y as isize + off, h) * w + x
                    };
                    acc += t * src[base + idx];
                }
                dst[base + y * w + x] = acc;
            }
        }
    }
}

fn blur_pass_adjoint(
    grad_out: &[f64],
    grad_in: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    taps: &[f64],
    horizontal: bool,
) {
    let r = (taps.len() / 2) as isize;
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let g = grad_out[base + y * w + x];
                for (k, &t) in taps.iter().enumerate() {
                    let off = k as isize - r;
                    let idx = if horizontal {
                        y * w + reflect_index(x as isize + off, w)
                    } else {
                        reflect_index(y as isize + off, h) * w + x
                    };
                    grad_in[base + idx] += t * g;
                }
            }
        }
    }
}

/// Per-channel separable Gaussian blur with reflect padding.
pub fn gaussian_blur_with(input: &Tensor, taps: &[f64]) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let mut tmp = vec![0.0; input.len()];
    let mut out = vec![0.0; input.len()];
    blur_pass(input.values(), &mut tmp, c, h, w, taps, true);
    blur_pass(&tmp, &mut out, c, h, w, taps, false);
    Tensor::new(input.shape().to_vec(), out)
}

pub fn gaussian_blur(input: &Tensor, sigma: f64) -> Result<Tensor> {
    let taps = gaussian_kernel(sigma)?;
    gaussian_blur_with(input, &taps)
}

pub fn gaussian_blur_backward(shape: &[usize], taps: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut tmp = vec![0.0; grad_out.len()];
    let mut gi = vec![0.0; grad_out.len()];
    blur_pass_adjoint(grad_out, &mut tmp, c, h, w, taps, false);
    blur_pass_adjoint(&tmp, &mut gi, c, h, w, taps, true);
    gi
}

pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if h == 0 || w == 0 {
        return shape_err("global average pool over an empty map");
    }
    let n = (h * w) as f64;
    Ok(Tensor::vector(
        (0..c).map(|ch| input.channel(ch).iter().sum::<f64>() / n).collect(),
    ))
}

pub fn global_avg_pool_backward(shape: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let plane = shape[1] * shape[2];
    let inv = 1.0 / plane as f64;
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat(g * inv).take(plane))
        .collect()
}

/// Number of entries LMF keeps in a map of `plane` cells at rate `d_percent`.
pub fn lmf_keep_count(plane: usize, d_percent: f64) -> Result<usize> {
    if !(0.0..100.0).contains(&d_percent) {
        return arg_err(format!("LMF rate must lie in [0, 100), got {}", d_percent));
    }
    let keep = ((1.0 - d_percent / 100.0) * plane as f64).round() as usize;
    Ok(keep.clamp(1, plane))
}

/// Boolean keep-mask of large magnitude filtering: per channel, the
/// `keep` largest-|value| entries, ties resolved toward the lower index.
pub fn lmf_mask(input: &Tensor, d_percent: f64) -> Result<Vec<bool>> {
    let (c, h, w) = input.chw()?;
    let plane = h * w;
    let keep = lmf_keep_count(plane, d_percent)?;
    let mut mask = vec![false; input.len()];
    let mut order: Vec<usize> = Vec::with_capacity(plane);
    for ch in 0..c {
        let vals = input.channel(ch);
        order.clear();
        order.extend(0..plane);
        // stable sort keeps row-major order among equal magnitudes
        order.sort_by(|&a, &b| vals[b].abs().total_cmp(&vals[a].abs()));
        for &i in &order[..keep] {
            mask[ch * plane + i] = true;
        }
    }
    Ok(mask)
}

pub fn apply_mask(input: &Tensor, mask: &[bool]) -> Tensor {
    let vals = input
        .values()
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), vals).expect("mask preserves shape")
}

/// Large magnitude filtering: zero the `d%` smallest-magnitude entries of each channel.
pub fn lmf(input: &Tensor, d_percent: f64) -> Result<Tensor> {
    let mask = lmf_mask(input, d_percent)?;
    Ok(apply_mask(input, &mask))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax cross-entropy of `logits` against class `label`.
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return arg_err(format!("label {} out of range for {} classes", label, logits.len()));
    }
    let (argmax, max) = logits
        .iter()
        .cloned()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, l)| if l > best.1 { (i, l) } else { best });
    // log-sum-exp minus the max, via ln_1p for accuracy when one logit dominates
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .map(|(_, &l)| (l - max).exp())
        .sum();
    Ok((max - logits[label]) + rest.ln_1p())
}

pub fn softmax_xent_backward(logits: &[f64], label: usize, grad_out: f64) -> Vec<f64> {
    let mut p = softmax(logits);
    p[label] -= 1.0;
    p.iter_mut().for_each(|v| *v *= grad_out);
    p
}

/// `weight [out, in] * input [in] + bias [out]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (out_dim, in_dim) = match weight.shape() {
        &[o, i] => (o, i),
        s => return shape_err(format!("linear weight must be 2-D, got {:?}", s)),
    };
    if input.len() != in_dim {
        return shape_err(format!("linear expects {} inputs, got {}", in_dim, input.len()));
    }
    if let Some(b) = bias {
        if b.len() != out_dim {
            return shape_err(format!("linear bias has {} entries, expected {}", b.len(), out_dim));
        }
    }
    let x = input.values();
    let wv = weight.values();
    let out = (0..out_dim)
        .map(|o| {
            let dot: f64 = wv[o * in_dim..(o + 1) * in_dim].iter().zip(x).map(|(a, b)| a * b).sum();
            dot + bias.map_or(0.0, |b| b.values()[o])
        })
        .collect();
    Ok(Tensor::vector(out))
}
