//! Dense-tensor numerics: convolution (plain and dilated), transposed
//! convolution, Leaky ReLU, their exact gradients, and parameter init.
//!
//! All tensors are NCHW, row-major, `f32`. Hot paths gather with an
//! im2col buffer and run an axpy-style matmul; reductions that feed
//! test oracles (loss sums, statistics) accumulate in `f64`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{PrnError, Result};

/// Dense 4-D array: (batch, channels, height, width), row-major f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: f32) -> Tensor {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![value; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Tensor> {
        if data.len() != n * c * h * w {
            return Err(PrnError::shape(
                "Tensor::from_vec",
                format!("{} elements for {}x{}x{}x{}", n * c * h * w, n, c, h, w),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f32 {
        let i = self.idx(n, c, y, x);
        &mut self.data[i]
    }

    /// Contiguous (h*w) slice of one channel plane of one batch item.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let start = self.idx(n, c, 0, 0);
        &self.data[start..start + self.h * self.w]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let start = self.idx(n, c, 0, 0);
        let len = self.h * self.w;
        &mut self.data[start..start + len]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate along the batch axis. Shapes must agree on (c, h, w).
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(PrnError::EmptyInput("Tensor::stack"))?;
        let (_, c, h, w) = first.shape();
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            if t.c != c || t.h != h || t.w != w {
                return Err(PrnError::shape(
                    "Tensor::stack",
                    format!("_x{}x{}x{}", c, h, w),
                    format!("{}x{}x{}x{}", t.n, t.c, t.h, t.w),
                ));
            }
            data.extend_from_slice(&t.data);
            n += t.n;
        }
        Tensor::from_vec(n, c, h, w, data)
    }

    /// Single batch item as its own tensor.
    pub fn slice_batch(&self, n: usize) -> Tensor {
        let per = self.c * self.h * self.w;
        Tensor {
            n: 1,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }
}

/// Per-side zero padding for a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn symmetric(v: usize, h: usize) -> Padding {
        Padding {
            top: v,
            bottom: v,
            left: h,
            right: h,
        }
    }

    pub fn none() -> Padding {
        Padding::symmetric(0, 0)
    }
}

/// Static description of a convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (kh, kw); both odd for the same-size configurations used here.
    pub kernel: (usize, usize),
    /// 1 = ordinary convolution; d samples taps d pixels apart.
    pub dilation: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    /// Stride-1 spec whose zero padding preserves spatial size:
    /// pad = (k - 1) * dilation / 2 per side (k odd).
    pub fn same(in_channels: usize, out_channels: usize, k: usize, dilation: usize) -> ConvSpec {
        debug_assert!(k % 2 == 1, "same-padding requires an odd kernel");
        let pad = (k - 1) * dilation / 2;
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            dilation,
            stride: 1,
            padding: Padding::symmetric(pad, pad),
        }
    }

    /// Receptive extent of the (possibly dilated) kernel: (k - 1) * d + 1.
    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            (self.kernel.0 - 1) * self.dilation + 1,
            (self.kernel.1 - 1) * self.dilation + 1,
        )
    }

    /// Output spatial dims of a forward convolution over an (h, w) input.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ekh, ekw) = self.effective_kernel();
        let ph = h + self.padding.top + self.padding.bottom;
        let pw = w + self.padding.left + self.padding.right;
        if ekh > ph || ekw > pw {
            return Err(PrnError::shape(
                "conv2d",
                format!("padded input >= effective kernel {}x{}", ekh, ekw),
                format!("padded input {}x{}", ph, pw),
            ));
        }
        Ok(((ph - ekh) / self.stride + 1, (pw - ekw) / self.stride + 1))
    }
}

/// Learnable parameters of one convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// (out_channels, in_channels, kh, kw).
    pub weights: Tensor,
    /// One bias per output channel.
    pub bias: Vec<f32>,
    pub spec: ConvSpec,
}

impl LayerParams {
    pub fn new(spec: ConvSpec, weights: Tensor, bias: Vec<f32>) -> Result<LayerParams> {
        let expect = (
            spec.out_channels,
            spec.in_channels,
            spec.kernel.0,
            spec.kernel.1,
        );
        if weights.shape() != expect || bias.len() != spec.out_channels {
            return Err(PrnError::shape(
                "LayerParams::new",
                format!("weights {:?}, bias len {}", expect, spec.out_channels),
                format!("weights {:?}, bias len {}", weights.shape(), bias.len()),
            ));
        }
        Ok(LayerParams {
            weights,
            bias,
            spec,
        })
    }

    pub fn zeros(spec: ConvSpec) -> LayerParams {
        LayerParams {
            weights: Tensor::zeros(
                spec.out_channels,
                spec.in_channels,
                spec.kernel.0,
                spec.kernel.1,
            ),
            bias: vec![0.0; spec.out_channels],
            spec,
        }
    }
}

fn check_in_channels(input: &Tensor, spec: &ConvSpec, context: &'static str) -> Result<()> {
    if input.channels() != spec.in_channels {
        return Err(PrnError::shape(
            context,
            format!("{} input channels", spec.in_channels),
            format!("{} input channels", input.channels()),
        ));
    }
    Ok(())
}

/// C[m][n] += A[m][k] * B[k][n], axpy order; `macs` counts multiplies as
/// each row pass issues them.
fn matmul_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, kd: usize, n: usize, macs: &mut u64) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (k, &aik) in a[i * kd..(i + 1) * kd].iter().enumerate() {
            let brow = &b[k * n..(k + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += aik * bv;
            }
            *macs += n as u64;
        }
    }
}

/// Dot product with eight partial sums so the reduction vectorizes.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (a8, b8) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = a8
        .remainder()
        .iter()
        .zip(b8.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    for (x, y) in a8.zip(b8) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// C[m][k] += A[m][n] * B[k][n]^T (dot products of rows).
fn matmul_abt(c: &mut [f32], a: &[f32], b: &[f32], m: usize, n: usize, kd: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..kd {
            c[i * kd + j] += dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
}

/// C[k][n] += A[m][k]^T * B[m][n].
fn matmul_atb(c: &mut [f32], a: &[f32], b: &[f32], m: usize, kd: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (k, &aik) in a[i * kd..(i + 1) * kd].iter().enumerate() {
            let crow = &mut c[k * n..(k + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += aik * bv;
            }
        }
    }
}

/// Gather one batch item into a column matrix: rows = ic*kh*kw, one column
/// per output position. Padding positions stay zero.
fn im2col(input: &Tensor, n: usize, spec: &ConvSpec, oh: usize, ow: usize, col: &mut [f32]) {
    let (kh, kw) = spec.kernel;
    let d = spec.dilation;
    let s = spec.stride;
    let (h, w) = (input.height(), input.width());
    let (pt, pl) = (spec.padding.top as isize, spec.padding.left as isize);
    col.fill(0.0);
    let mut row = 0usize;
    for c in 0..spec.in_channels {
        let plane = input.plane(n, c);
        for ky in 0..kh {
            for kx in 0..kw {
                let out_row = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ky * d) as isize - pt;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut out_row[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        // Valid ox form one contiguous run; copy it.
                        let shift = kx as isize * d as isize - pl; // ix = ox + shift
                        let lo = (-shift).max(0) as usize;
                        let hi_signed = w as isize - shift;
                        let hi = hi_signed.clamp(0, ow as isize) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + shift) as usize;
                            dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, dv) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx * d) as isize - pl;
                            if ix >= 0 && ix < w as isize {
                                *dv = src[ix as usize];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter a column matrix back onto an input-shaped gradient (adjoint of
/// `im2col`).
fn col2im(col: &[f32], grad_input: &mut Tensor, n: usize, spec: &ConvSpec, oh: usize, ow: usize) {
    let (kh, kw) = spec.kernel;
    let d = spec.dilation;
    let s = spec.stride;
    let (h, w) = (grad_input.height(), grad_input.width());
    let (pt, pl) = (spec.padding.top as isize, spec.padding.left as isize);
    let mut row = 0usize;
    for c in 0..spec.in_channels {
        let plane = grad_input.plane_mut(n, c);
        for ky in 0..kh {
            for kx in 0..kw {
                let col_row = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ky * d) as isize - pt;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &col_row[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        // Valid ox form one contiguous run, as in im2col.
                        let shift = kx as isize * d as isize - pl; // ix = ox + shift
                        let lo = (-shift).max(0) as usize;
                        let hi = (w as isize - shift).clamp(0, ow as isize) as usize;
                        if lo < hi {
                            let d0 = (lo as isize + shift) as usize;
                            for (dv, &gv) in dst[d0..d0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                *dv += gv;
                            }
                        }
                    } else {
                        for (ox, &gv) in src.iter().enumerate() {
                            let ix = (ox * s + kx * d) as isize - pl;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += gv;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution. Output size follows `spec.out_dims`; the stride-1
/// same-padding specs used by the model preserve spatial size.
pub fn conv2d_forward(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let mut macs = 0u64;
    conv2d_forward_counted(input, params, &mut macs)
}

/// Forward convolution that tallies the multiplies it actually issues.
pub fn conv2d_forward_counted(
    input: &Tensor,
    params: &LayerParams,
    macs: &mut u64,
) -> Result<Tensor> {
    let spec = &params.spec;
    check_in_channels(input, spec, "conv2d_forward")?;
    let (oh, ow) = spec.out_dims(input.height(), input.width())?;
    let (kh, kw) = spec.kernel;
    let kd = spec.in_channels * kh * kw;
    let cols = oh * ow;
    let mut out = Tensor::zeros(input.batch(), spec.out_channels, oh, ow);
    let mut col = vec![0.0f32; kd * cols];
    for n in 0..input.batch() {
        im2col(input, n, spec, oh, ow, &mut col);
        let start = out.idx(n, 0, 0, 0);
        matmul_acc(
            &mut out.data_mut()[start..start + spec.out_channels * cols],
            params.weights.data(),
            &col,
            spec.out_channels,
            kd,
            cols,
            macs,
        );
        for oc in 0..spec.out_channels {
            let b = params.bias[oc];
            if b != 0.0 {
                for v in out.plane_mut(n, oc) {
                    *v += b;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss through `conv2d_forward`.
///
/// Returns (grad_input, grad_weights, grad_bias) given the upstream
/// gradient w.r.t. the convolution output.
pub fn conv2d_backward(
    input: &Tensor,
    params: &LayerParams,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f32>)> {
    let (gi, gw, gb) = conv2d_backward_impl(input, params, grad_out, true)?;
    Ok((gi.expect("grad_input requested"), gw, gb))
}

/// As `conv2d_backward` but skips the input gradient (for the first layer
/// of a network, whose input is data).
pub(crate) fn conv2d_backward_impl(
    input: &Tensor,
    params: &LayerParams,
    grad_out: &Tensor,
    need_grad_input: bool,
) -> Result<(Option<Tensor>, Tensor, Vec<f32>)> {
    let spec = &params.spec;
    check_in_channels(input, spec, "conv2d_backward")?;
    let (oh, ow) = spec.out_dims(input.height(), input.width())?;
    let expect = (input.batch(), spec.out_channels, oh, ow);
    if grad_out.shape() != expect {
        return Err(PrnError::shape(
            "conv2d_backward",
            format!("grad_out {:?}", expect),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let (kh, kw) = spec.kernel;
    let kd = spec.in_channels * kh * kw;
    let cols = oh * ow;

    let mut grad_input = need_grad_input.then(|| {
        Tensor::zeros(input.batch(), spec.in_channels, input.height(), input.width())
    });
    let mut grad_weights = Tensor::zeros(spec.out_channels, spec.in_channels, kh, kw);
    let mut grad_bias = vec![0.0f32; spec.out_channels];
    let mut col = vec![0.0f32; kd * cols];
    let mut grad_col = vec![0.0f32; kd * cols];

    for n in 0..input.batch() {
        let g_start = grad_out.idx(n, 0, 0, 0);
        let g_mat = &grad_out.data()[g_start..g_start + spec.out_channels * cols];

        for (oc, gb) in grad_bias.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for &g in &g_mat[oc * cols..(oc + 1) * cols] {
                acc += g as f64;
            }
            *gb += acc as f32;
        }

        im2col(input, n, spec, oh, ow, &mut col);
        // dL/dW[oc, r] = sum_cols g[oc, col] * im2col[r, col]
        matmul_abt(
            grad_weights.data_mut(),
            g_mat,
            &col,
            spec.out_channels,
            cols,
            kd,
        );
        if let Some(grad_input) = &mut grad_input {
            // dL/dcol[r, col] = sum_oc W[oc, r] * g[oc, col]
            grad_col.fill(0.0);
            matmul_atb(
                &mut grad_col,
                params.weights.data(),
                g_mat,
                spec.out_channels,
                kd,
                cols,
            );
            col2im(&grad_col, grad_input, n, spec, oh, ow);
        }
    }
    Ok((grad_input, grad_weights, grad_bias))
}

fn check_deconv(input: &Tensor, params: &LayerParams, stride: usize) -> Result<()> {
    if !(2..=4).contains(&stride) {
        return Err(PrnError::UnsupportedStride(stride));
    }
    check_in_channels(input, &params.spec, "deconv2d")?;
    let (kh, kw) = params.spec.kernel;
    if kh < stride || kw < stride {
        return Err(PrnError::shape(
            "deconv2d",
            format!("kernel >= stride {}", stride),
            format!("kernel {}x{}", kh, kw),
        ));
    }
    Ok(())
}

/// Transposed convolution used for learned upsampling.
///
/// Geometry: insert stride-1 zeros between input samples, convolve with
/// full zero padding, center-crop to exactly (stride*h, stride*w). The
/// implementation scatters input pixels directly, skipping the inserted
/// zeros; the zero-insertion form is kept as a test oracle.
pub fn deconv2d_forward(input: &Tensor, params: &LayerParams, stride: usize) -> Result<Tensor> {
    deconv_scatter::<false>(input, params, stride, &mut 0)
}

/// As `deconv2d_forward`, tallying every multiply-accumulate it issues.
pub fn deconv2d_forward_counted(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    macs: &mut u64,
) -> Result<Tensor> {
    deconv_scatter::<true>(input, params, stride, macs)
}

fn deconv_scatter<const COUNT: bool>(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    macs: &mut u64,
) -> Result<Tensor> {
    check_deconv(input, params, stride)?;
    let spec = &params.spec;
    let (kh, kw) = spec.kernel;
    let (h, w) = (input.height(), input.width());
    let (oh, ow) = (stride * h, stride * w);
    // Crop offset of the centered stride*h window inside the full
    // zero-insertion output.
    let dy = (kh - stride) / 2;
    let dx = (kw - stride) / 2;
    let mut out = Tensor::zeros(input.batch(), spec.out_channels, oh, ow);

    // Rows of the kernel are flipped once so the inner scatter walks both
    // the output row and the kernel row forward (vectorizable).
    let mut wflip = vec![0.0f32; kh * kw];
    for n in 0..input.batch() {
        for oc in 0..spec.out_channels {
            for ic in 0..spec.in_channels {
                let wplane = params.weights.plane(oc, ic);
                for ky in 0..kh {
                    for j in 0..kw {
                        wflip[ky * kw + j] = wplane[ky * kw + kw - 1 - j];
                    }
                }
                let iplane = input.plane(n, ic);
                let oplane = out.plane_mut(n, oc);
                for iy in 0..h {
                    let base_y = (stride * iy + kh - 1) as isize - dy as isize;
                    for ix in 0..w {
                        let v = iplane[iy * w + ix];
                        let base_x = (stride * ix + kw - 1) as isize - dx as isize;
                        // ox = base_x - kx runs over one contiguous window.
                        let ox_lo = (base_x - kw as isize + 1).clamp(0, ow as isize) as usize;
                        let ox_hi = (base_x + 1).clamp(0, ow as isize) as usize;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let j0 = (ox_lo as isize - (base_x - kw as isize + 1)) as usize;
                        let run = ox_hi - ox_lo;
                        for ky in 0..kh {
                            let oy = base_y - ky as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let orow =
                                &mut oplane[oy as usize * ow + ox_lo..oy as usize * ow + ox_hi];
                            let wrow = &wflip[ky * kw + j0..ky * kw + j0 + run];
                            for (o, &wv) in orow.iter_mut().zip(wrow.iter()) {
                                *o += v * wv;
                            }
                            if COUNT {
                                *macs += run as u64;
                            }
                        }
                    }
                }
            }
        }
        for oc in 0..spec.out_channels {
            let b = params.bias[oc];
            if b != 0.0 {
                for v in out.plane_mut(n, oc) {
                    *v += b;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss through `deconv2d_forward`.
pub fn deconv2d_backward(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f32>)> {
    check_deconv(input, params, stride)?;
    let spec = &params.spec;
    let (kh, kw) = spec.kernel;
    let (h, w) = (input.height(), input.width());
    let (oh, ow) = (stride * h, stride * w);
    let expect = (input.batch(), spec.out_channels, oh, ow);
    if grad_out.shape() != expect {
        return Err(PrnError::shape(
            "deconv2d_backward",
            format!("grad_out {:?}", expect),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let dy = (kh - stride) / 2;
    let dx = (kw - stride) / 2;

    let mut grad_input = Tensor::zeros(input.batch(), spec.in_channels, h, w);
    let mut grad_weights = Tensor::zeros(spec.out_channels, spec.in_channels, kh, kw);
    let mut grad_bias = vec![0.0f32; spec.out_channels];

    // Same flipped-row trick as the forward scatter: both the grad row and
    // the kernel row are walked forward.
    let mut wflip = vec![0.0f32; kh * kw];
    let mut gwflip = vec![0.0f32; kh * kw];
    for (oc, gb) in grad_bias.iter_mut().enumerate() {
        for n in 0..input.batch() {
            let mut acc = 0.0f64;
            for &g in grad_out.plane(n, oc) {
                acc += g as f64;
            }
            *gb += acc as f32;
        }
        for ic in 0..spec.in_channels {
            let wplane = params.weights.plane(oc, ic);
            for ky in 0..kh {
                for j in 0..kw {
                    wflip[ky * kw + j] = wplane[ky * kw + kw - 1 - j];
                }
            }
            gwflip.fill(0.0);
            for n in 0..input.batch() {
                let gplane = grad_out.plane(n, oc);
                let iplane = input.plane(n, ic);
                let gi_plane = grad_input.plane_mut(n, ic);
                for iy in 0..h {
                    let base_y = (stride * iy + kh - 1) as isize - dy as isize;
                    for ix in 0..w {
                        let base_x = (stride * ix + kw - 1) as isize - dx as isize;
                        let ox_lo = (base_x - kw as isize + 1).clamp(0, ow as isize) as usize;
                        let ox_hi = (base_x + 1).clamp(0, ow as isize) as usize;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let j0 = (ox_lo as isize - (base_x - kw as isize + 1)) as usize;
                        let run = ox_hi - ox_lo;
                        let v = iplane[iy * w + ix];
                        let mut gi = 0.0f32;
                        for ky in 0..kh {
                            let oy = base_y - ky as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let grow = &gplane[oy as usize * ow + ox_lo..oy as usize * ow + ox_hi];
                            let wrow = &wflip[ky * kw + j0..ky * kw + j0 + run];
                            let gwrow = &mut gwflip[ky * kw + j0..ky * kw + j0 + run];
                            gi += dot(wrow, grow);
                            for (gw, &g) in gwrow.iter_mut().zip(grow.iter()) {
                                *gw += v * g;
                            }
                        }
                        gi_plane[iy * w + ix] += gi;
                    }
                }
            }
            let gw_start = (oc * spec.in_channels + ic) * kh * kw;
            for ky in 0..kh {
                for j in 0..kw {
                    grad_weights.data_mut()[gw_start + ky * kw + kw - 1 - j] +=
                        gwflip[ky * kw + j];
                }
            }
        }
    }
    Ok((grad_input, grad_weights, grad_bias))
}

/// y = x if x >= 0 else slope * x, elementwise. `slope` in (0, 1).
pub fn leaky_relu(input: &Tensor, slope: f32) -> Tensor {
    debug_assert!(slope > 0.0 && slope < 1.0);
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    out
}

/// Upstream gradient through `leaky_relu`, given the pre-activation input.
pub fn leaky_relu_backward(input: &Tensor, grad_out: &Tensor, slope: f32) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(PrnError::shape(
            "leaky_relu_backward",
            format!("{:?}", input.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut out = grad_out.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data().iter()) {
        if x < 0.0 {
            *g *= slope;
        }
    }
    Ok(out)
}

/// Xavier/Glorot uniform init: weights ~ U(-a, a) with
/// a = sqrt(6 / (fan_in + fan_out)), bias zero. Deterministic per seed.
pub fn xavier_init(spec: ConvSpec, seed: u64) -> LayerParams {
    let (kh, kw) = spec.kernel;
    let fan_in = spec.in_channels * kh * kw;
    let fan_out = spec.out_channels * kh * kw;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let count = spec.out_channels * spec.in_channels * kh * kw;
    let data: Vec<f32> = (0..count).map(|_| rng.random_range(-limit..limit)).collect();
    LayerParams {
        weights: Tensor::from_vec(spec.out_channels, spec.in_channels, kh, kw, data)
            .expect("xavier_init shape is consistent by construction"),
        bias: vec![0.0; spec.out_channels],
        spec,
    }
}

/// Catmull-Rom cubic kernel, a = -0.5.
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t < 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

/// Deconvolution kernel extent used for the upsampling layer: 4*scale + 1.
///
/// This is the smallest odd size that holds all nonzero taps of the
/// half-pixel bicubic interpolator at every phase (4*scale - scale%2 taps),
/// and it reduces to the classical 9x9 at scale 2.
pub fn deconv_kernel_size(scale: usize) -> usize {
    4 * scale + 1
}

/// One-dimensional transposed-conv taps that reproduce half-pixel-center
/// bicubic upsampling by `scale` under the geometry of `deconv2d_forward`.
pub(crate) fn bicubic_deconv_taps(scale: usize, k: usize) -> Vec<f64> {
    let s = scale as f64;
    let delta = ((k - scale) / 2) as f64;
    // Output o reads tap index k = s*i - o - delta + K - 1; solving the
    // half-pixel resample weight for that index gives a phase-consistent
    // closed form that depends on k alone.
    let center = (k - 1) as f64 - delta + 0.5 * (1.0 - s);
    (0..k).map(|i| cubic((center - i as f64) / s)).collect()
}

/// Bias-free upsampling layer (64 -> 1) whose untrained output equals
/// bicubic interpolation of the mean over input channels.
///
/// Every input-channel slice holds the separable bicubic kernel divided by
/// the channel count, so summing over channels reproduces bicubic exactly
/// on channel-replicated input.
pub fn bicubic_deconv_init(scale: usize) -> Result<LayerParams> {
    bicubic_deconv_init_channels(scale, 64)
}

/// As `bicubic_deconv_init` with an explicit input channel count.
pub fn bicubic_deconv_init_channels(scale: usize, in_channels: usize) -> Result<LayerParams> {
    if !(2..=4).contains(&scale) {
        return Err(PrnError::UnsupportedScale(scale));
    }
    let k = deconv_kernel_size(scale);
    let taps = bicubic_deconv_taps(scale, k);
    let spec = ConvSpec {
        in_channels,
        out_channels: 1,
        kernel: (k, k),
        dilation: 1,
        stride: scale,
        padding: Padding::none(),
    };
    let mut weights = Tensor::zeros(1, in_channels, k, k);
    let norm = in_channels as f64;
    for ic in 0..in_channels {
        let plane = weights.plane_mut(0, ic);
        for (ky, ty) in taps.iter().enumerate() {
            for (kx, tx) in taps.iter().enumerate() {
                plane[ky * k + kx] = (ty * tx / norm) as f32;
            }
        }
    }
    Ok(LayerParams {
        weights,
        bias: vec![0.0],
        spec,
    })
}
