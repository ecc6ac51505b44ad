//! Independent oracles and fixtures shared by the integration suites.
//!
//! Everything here is deliberately written from the definitions, not by
//! calling the library's hot paths: naive nested-loop convolution,
//! zero-insertion transposed convolution, a direct 16-tap bicubic
//! resampler, and finite-difference utilities.

#![allow(dead_code)]

use prn_core::imagepipe::ImagePlane;
use prn_core::tensorops::{LayerParams, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Direct convolution: seven nested loops, f64 accumulation.
pub fn naive_conv2d(input: &Tensor, params: &LayerParams) -> Tensor {
    let spec = &params.spec;
    let (n_b, _, h, w) = input.shape();
    let (kh, kw) = spec.kernel;
    let (d, s) = (spec.dilation, spec.stride);
    let (pt, pl) = (spec.padding.top as isize, spec.padding.left as isize);
    let ekh = (kh - 1) * d + 1;
    let ekw = (kw - 1) * d + 1;
    let oh = (h + spec.padding.top + spec.padding.bottom - ekh) / s + 1;
    let ow = (w + spec.padding.left + spec.padding.right - ekw) / s + 1;
    let mut out = Tensor::zeros(n_b, spec.out_channels, oh, ow);
    for n in 0..n_b {
        for oc in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = params.bias[oc] as f64;
                    for ic in 0..spec.in_channels {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky * d) as isize - pt;
                                let ix = (ox * s + kx * d) as isize - pl;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += params.weights.at(oc, ic, ky, kx) as f64
                                        * input.at(n, ic, iy as usize, ix as usize) as f64;
                                }
                            }
                        }
                    }
                    *out.at_mut(n, oc, oy, ox) = acc as f32;
                }
            }
        }
    }
    out
}

/// Transposed convolution by the book: insert stride-1 zeros, pad fully,
/// correlate naively, center-crop to (stride*h, stride*w).
pub fn zero_insertion_deconv(input: &Tensor, params: &LayerParams, stride: usize) -> Tensor {
    let spec = &params.spec;
    let (n_b, _, h, w) = input.shape();
    let (kh, kw) = spec.kernel;
    let hz = (h - 1) * stride + 1;
    let wz = (w - 1) * stride + 1;
    let full_h = hz + kh - 1;
    let full_w = wz + kw - 1;
    let dy = (kh - stride) / 2;
    let dx = (kw - stride) / 2;
    let (oh, ow) = (stride * h, stride * w);
    let mut out = Tensor::zeros(n_b, spec.out_channels, oh, ow);
    for n in 0..n_b {
        for oc in 0..spec.out_channels {
            let mut full = vec![0.0f64; full_h * full_w];
            for ic in 0..spec.in_channels {
                for (fy, row) in full.chunks_mut(full_w).enumerate() {
                    for (fx, v) in row.iter_mut().enumerate() {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                // Correlation over the zero-stuffed, fully
                                // padded plane: z index = f + k - (K - 1).
                                let zy = fy as isize + ky as isize - (kh as isize - 1);
                                let zx = fx as isize + kx as isize - (kw as isize - 1);
                                if zy < 0 || zx < 0 || zy >= hz as isize || zx >= wz as isize {
                                    continue;
                                }
                                let (zy, zx) = (zy as usize, zx as usize);
                                if zy % stride != 0 || zx % stride != 0 {
                                    continue;
                                }
                                *v += params.weights.at(oc, ic, ky, kx) as f64
                                    * input.at(n, ic, zy / stride, zx / stride) as f64;
                            }
                        }
                    }
                }
            }
            for y in 0..oh {
                for x in 0..ow {
                    *out.at_mut(n, oc, y, x) =
                        (full[(y + dy) * full_w + x + dx] + params.bias[oc] as f64) as f32;
                }
            }
        }
    }
    out
}

fn cubic_ref(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        a * (((t - 5.0) * t + 8.0) * t - 4.0)
    } else {
        0.0
    }
}

/// Direct (non-separable) bicubic resampler: 16 taps per output pixel,
/// half-pixel centers, edge-clamped, all in f64.
pub fn bicubic_ref(plane: &ImagePlane, out_w: usize, out_h: usize) -> ImagePlane {
    let (w, h) = (plane.width(), plane.height());
    let rx = w as f64 / out_w as f64;
    let ry = h as f64 / out_h as f64;
    let mut data = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let sy = (oy as f64 + 0.5) * ry - 0.5;
        let by = sy.floor();
        for ox in 0..out_w {
            let sx = (ox as f64 + 0.5) * rx - 0.5;
            let bx = sx.floor();
            let mut acc = 0.0f64;
            for ty in -1..=2isize {
                let wy = cubic_ref(sy - (by + ty as f64));
                let iy = ((by as isize + ty).clamp(0, h as isize - 1)) as usize;
                for tx in -1..=2isize {
                    let wx = cubic_ref(sx - (bx + tx as f64));
                    let ix = ((bx as isize + tx).clamp(0, w as isize - 1)) as usize;
                    acc += wy * wx * plane.at(iy, ix) as f64;
                }
            }
            data.push(acc as f32);
        }
    }
    ImagePlane::new(out_w, out_h, data).unwrap()
}

/// Single-batch f64 activation tensor for the finite-difference oracles.
/// Keeping the whole chain in f64 makes the FD reference far more precise
/// than the f32 gradients it validates.
#[derive(Debug, Clone)]
pub struct F64Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl F64Tensor {
    pub fn from_tensor(t: &Tensor) -> F64Tensor {
        let (n, c, h, w) = t.shape();
        assert_eq!(n, 1);
        F64Tensor {
            c,
            h,
            w,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }
}

/// f64 convolution with the library's geometry (padding, dilation, stride).
pub fn conv_f64(x: &F64Tensor, params: &LayerParams) -> F64Tensor {
    let spec = &params.spec;
    let (kh, kw) = spec.kernel;
    let (d, s) = (spec.dilation, spec.stride);
    let (pt, pl) = (spec.padding.top as isize, spec.padding.left as isize);
    let ekh = (kh - 1) * d + 1;
    let ekw = (kw - 1) * d + 1;
    let oh = (x.h + spec.padding.top + spec.padding.bottom - ekh) / s + 1;
    let ow = (x.w + spec.padding.left + spec.padding.right - ekw) / s + 1;
    let mut out = F64Tensor {
        c: spec.out_channels,
        h: oh,
        w: ow,
        data: vec![0.0; spec.out_channels * oh * ow],
    };
    for oc in 0..spec.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = params.bias[oc] as f64;
                for ic in 0..spec.in_channels {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * s + ky * d) as isize - pt;
                            let ix = (ox * s + kx * d) as isize - pl;
                            if iy >= 0 && iy < x.h as isize && ix >= 0 && ix < x.w as isize {
                                acc += params.weights.at(oc, ic, ky, kx) as f64
                                    * x.at(ic, iy as usize, ix as usize);
                            }
                        }
                    }
                }
                out.data[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// f64 transposed convolution with the library's crop geometry.
pub fn deconv_f64(x: &F64Tensor, params: &LayerParams, stride: usize) -> F64Tensor {
    let spec = &params.spec;
    let (kh, kw) = spec.kernel;
    let (oh, ow) = (stride * x.h, stride * x.w);
    let dy = (kh - stride) / 2;
    let dx = (kw - stride) / 2;
    let mut out = F64Tensor {
        c: spec.out_channels,
        h: oh,
        w: ow,
        data: vec![0.0; spec.out_channels * oh * ow],
    };
    for oc in 0..spec.out_channels {
        for v in &mut out.data[(oc * oh * ow)..((oc + 1) * oh * ow)] {
            *v = params.bias[oc] as f64;
        }
        for ic in 0..spec.in_channels {
            for iy in 0..x.h {
                for ix in 0..x.w {
                    let v = x.at(ic, iy, ix);
                    for ky in 0..kh {
                        let oy = (stride * iy + kh - 1) as isize - dy as isize - ky as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox = (stride * ix + kw - 1) as isize - dx as isize - kx as isize;
                            if ox >= 0 && ox < ow as isize {
                                out.data[(oc * oh + oy as usize) * ow + ox as usize] +=
                                    v * params.weights.at(oc, ic, ky, kx) as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn leaky_f64(x: &F64Tensor, slope: f64) -> F64Tensor {
    let mut out = x.clone();
    for v in &mut out.data {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    out
}

pub fn half_sq_f64(x: &F64Tensor) -> f64 {
    0.5 * x.data.iter().map(|&v| v * v).sum::<f64>()
}

pub fn mse_f64(x: &F64Tensor, target: &Tensor) -> f64 {
    let n = x.data.len() as f64;
    x.data
        .iter()
        .zip(target.data().iter())
        .map(|(&a, &b)| (a - b as f64) * (a - b as f64))
        .sum::<f64>()
        / n
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max)
}

/// Relative error with a small floor so zero-gradient coordinates compare
/// absolutely at 1e-4 * tolerance.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// 0.5 * sum of squares, the loss used by the layer-level gradient checks.
pub fn half_sq_loss(t: &Tensor) -> f64 {
    0.5 * t
        .data()
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
}

pub fn rand_tensor(rng: &mut ChaCha20Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let data = (0..n * c * h * w)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    Tensor::from_vec(n, c, h, w, data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Deterministic texture-rich image: a smooth tilted base carrying sharp
/// bars and disks. Bar orientations sit on the 45-degree lattice (closed
/// under the dihedral augmentations) and disk rims supply every other
/// orientation. All features stay inside a margin, so patch borders are
/// smooth; the interior is edge-dense content that bicubic blurs badly
/// at x3.
pub fn texture_image(w: usize, h: usize, seed: u64) -> ImagePlane {
    let mut rng = rng(seed ^ 0x7465_7874);
    // Discrete vocabulary: feature positions vary freely (convolution is
    // translation-equivariant) while levels and sizes come from small
    // fixed sets, so a handful of images covers the whole family.
    let base: f32 = [0.45f32, 0.55][rng.random_range(0..2)];
    let tilt_x: f32 = [-0.1f32, 0.0, 0.1][rng.random_range(0..3)];
    let tilt_y: f32 = [-0.1f32, 0.0, 0.1][rng.random_range(0..3)];
    let amps = [-0.25f32, 0.25];
    // Rotated bars: center, axis direction, half-length, half-width, amp.
    let bars: Vec<(f32, f32, f32, f32, f32, f32, f32)> = (0..5)
        .map(|_| {
            let angle: f32 = std::f32::consts::FRAC_PI_4 * rng.random_range(0..4) as f32;
            let cx: f32 = rng.random_range(0.32..0.68);
            let cy: f32 = rng.random_range(0.32..0.68);
            let half_len = [0.12f32, 0.18][rng.random_range(0..2)];
            let half_wid = [0.05f32, 0.09][rng.random_range(0..2)];
            let amp = amps[rng.random_range(0..amps.len())];
            (cx, cy, angle.cos(), angle.sin(), half_len, half_wid, amp)
        })
        .collect();
    let disks: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            let cx: f32 = rng.random_range(0.32..0.68);
            let cy: f32 = rng.random_range(0.32..0.68);
            let r = [0.08f32, 0.13][rng.random_range(0..2)];
            let amp = amps[rng.random_range(0..amps.len())];
            (cx, cy, r, amp)
        })
        .collect();
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (xn, yn) = (x as f32 / w as f32, y as f32 / h as f32);
            let mut v = base + tilt_x * xn + tilt_y * yn;
            for &(cx, cy, dx, dy, hl, hw, amp) in &bars {
                let (ux, uy) = (xn - cx, yn - cy);
                let along = ux * dx + uy * dy;
                let across = -ux * dy + uy * dx;
                if along.abs() <= hl && across.abs() <= hw {
                    v += amp;
                }
            }
            for &(cx, cy, r, amp) in &disks {
                let d = ((xn - cx).powi(2) + (yn - cy).powi(2)).sqrt();
                if d < r {
                    v += amp;
                }
            }
            data.push(v.clamp(0.03, 0.97));
        }
    }
    ImagePlane::new(w, h, data).unwrap()
}

/// Square crop at a given offset.
pub fn crop_view(plane: &ImagePlane, row: usize, col: usize, size: usize) -> ImagePlane {
    assert!(row + size <= plane.height() && col + size <= plane.width());
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            data.push(plane.at(row + y, col + x));
        }
    }
    ImagePlane::new(size, size, data).unwrap()
}

/// The eight dihedral views of a square plane (rotations and flips), the
/// usual augmentation for small SR training sets.
pub fn dihedral_views(plane: &ImagePlane) -> Vec<ImagePlane> {
    let n = plane.width();
    assert_eq!(n, plane.height(), "dihedral views need a square plane");
    let mut views = Vec::with_capacity(8);
    for rot in 0..4 {
        for flip in [false, true] {
            let mut data = Vec::with_capacity(n * n);
            for y in 0..n {
                for x in 0..n {
                    let (mut sy, mut sx) = (y, x);
                    if flip {
                        sx = n - 1 - sx;
                    }
                    for _ in 0..rot {
                        let (ny, nx) = (sx, n - 1 - sy);
                        sy = ny;
                        sx = nx;
                    }
                    data.push(plane.at(sy, sx));
                }
            }
            views.push(ImagePlane::new(n, n, data).unwrap());
        }
    }
    views
}

/// The luminance plane the evaluation pipeline would extract from a gray
/// image carrying `plane` in all three RGB channels. Training on these
/// keeps the value distribution identical between training and evaluation.
pub fn as_eval_luminance(plane: &ImagePlane) -> ImagePlane {
    use prn_core::imagepipe::{rgb_to_ycbcr, ColorImage, ColorSpace};
    let data: Vec<f32> = plane.data().iter().flat_map(|&v| [v, v, v]).collect();
    let img = ColorImage::new(plane.width(), plane.height(), ColorSpace::Rgb, data).unwrap();
    rgb_to_ycbcr(&img).unwrap().channel(0)
}

/// Mostly-flat image with a high-contrast checkered band in the top
/// `texture_rows` rows; patches outside the band tag mild, patches inside
/// tag severe.
pub fn flat_dominant_image(w: usize, h: usize, seed: u64, texture_rows: usize) -> ImagePlane {
    let mut data = vec![0.5f32; w * h];
    let s = seed as usize;
    for y in 0..texture_rows.min(h) {
        for x in 0..w {
            data[y * w + x] = if (y / 2 + x / 2 + s) % 2 == 0 { 0.1 } else { 0.9 };
        }
    }
    ImagePlane::new(w, h, data).unwrap()
}

/// f64 oracle of one routed pass ending in the training loss: naive f64
/// convolutions, activations, transposed convolution, then MSE. Also
/// returns the sign pattern of every pre-activation, which finite
/// difference checks use to reject kink-crossing perturbations.
pub fn routed_loss_f64_signed(
    model: &prn_core::prnet::PrnModel,
    patch: &Tensor,
    target: &Tensor,
    tag: prn_core::prior::DifficultyTag,
    scale: usize,
) -> (f64, Vec<bool>) {
    use prn_core::prnet::StageKind;
    let mut x = F64Tensor::from_tensor(patch);
    let mut signs = Vec::new();
    for kind in model.route_kinds(tag) {
        let bank = match kind {
            StageKind::Early => &model.stages.early,
            StageKind::Mid => &model.stages.mid,
            StageKind::Late => &model.stages.late,
            StageKind::EarlyDilated => &model.stages.early_dilated,
            StageKind::MidDilated => &model.stages.mid_dilated,
            StageKind::Upsampler => unreachable!(),
        };
        for layer in bank {
            let pre = conv_f64(&x, layer);
            signs.extend(pre.data.iter().map(|&v| v >= 0.0));
            x = leaky_f64(&pre, prn_core::prnet::LEAKY_SLOPE as f64);
        }
    }
    let up = &model.stages.upsamplers[&scale];
    let out = deconv_f64(&x, up, scale);
    (mse_f64(&out, target), signs)
}

pub fn routed_loss_f64(
    model: &prn_core::prnet::PrnModel,
    patch: &Tensor,
    target: &Tensor,
    tag: prn_core::prior::DifficultyTag,
    scale: usize,
) -> f64 {
    routed_loss_f64_signed(model, patch, target, tag, scale).0
}

/// Central finite difference of a parameter coordinate under loss
/// 0.5*sum(out^2), evaluated with an f64 oracle forward so the reference
/// is far more precise than the f32 gradients it validates.
pub fn fd_weight(
    forward: &dyn Fn(&LayerParams) -> F64Tensor,
    params: &LayerParams,
    idx: usize,
    eps: f32,
) -> f64 {
    let mut plus = params.clone();
    plus.weights.data_mut()[idx] += eps;
    let mut minus = params.clone();
    minus.weights.data_mut()[idx] -= eps;
    (half_sq_f64(&forward(&plus)) - half_sq_f64(&forward(&minus))) / (2.0 * eps as f64)
}

pub fn fd_bias(
    forward: &dyn Fn(&LayerParams) -> F64Tensor,
    params: &LayerParams,
    idx: usize,
    eps: f32,
) -> f64 {
    let mut plus = params.clone();
    plus.bias[idx] += eps;
    let mut minus = params.clone();
    minus.bias[idx] -= eps;
    (half_sq_f64(&forward(&plus)) - half_sq_f64(&forward(&minus))) / (2.0 * eps as f64)
}

pub fn fd_input(
    forward: &dyn Fn(&F64Tensor) -> F64Tensor,
    input: &F64Tensor,
    idx: usize,
    eps: f64,
) -> f64 {
    let mut plus = input.clone();
    plus.data[idx] += eps;
    let mut minus = input.clone();
    minus.data[idx] -= eps;
    (half_sq_f64(&forward(&plus)) - half_sq_f64(&forward(&minus))) / (2.0 * eps)
}

pub fn sample_indices(rng: &mut ChaCha20Rng, len: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..len)).collect()
}

pub fn random_layer(rng: &mut ChaCha20Rng, spec: prn_core::tensorops::ConvSpec) -> LayerParams {
    let mut p = prn_core::tensorops::xavier_init(spec, rng.random());
    for b in p.bias.iter_mut() {
        *b = rng.random_range(-0.3f32..0.3);
    }
    p
}

/// Gradient check of one convolution spec on >= `samples` coordinates
/// spread over weights, bias, and input. Returns the worst relative error.
pub fn check_conv_gradients(
    spec: prn_core::tensorops::ConvSpec,
    seed: u64,
    samples: usize,
) -> f64 {
    use prn_core::tensorops::{conv2d_backward, conv2d_forward};
    let mut rng = rng(seed);
    let input = rand_tensor(&mut rng, 1, spec.in_channels, 7, 8);
    let input64 = F64Tensor::from_tensor(&input);
    let params = random_layer(&mut rng, spec);
    let eps = 1e-3f32;
    let out = conv2d_forward(&input, &params).unwrap();
    // d(0.5*sum(out^2))/d(out) = out.
    let (gi, gw, gb) = conv2d_backward(&input, &params, &out).unwrap();

    let fwd_p = |p: &LayerParams| conv_f64(&input64, p);
    let fwd_x = |x: &F64Tensor| conv_f64(x, &params);
    let mut worst = 0.0f64;
    for &i in &sample_indices(&mut rng, gw.numel(), samples) {
        worst = worst.max(rel_err(gw.data()[i] as f64, fd_weight(&fwd_p, &params, i, eps)));
    }
    for (i, &g) in gb.iter().enumerate() {
        worst = worst.max(rel_err(g as f64, fd_bias(&fwd_p, &params, i, eps)));
    }
    for &i in &sample_indices(&mut rng, gi.numel(), samples) {
        worst = worst.max(rel_err(
            gi.data()[i] as f64,
            fd_input(&fwd_x, &input64, i, eps as f64),
        ));
    }
    worst
}

/// As `check_conv_gradients` for a transposed-convolution spec.
pub fn check_deconv_gradients(
    spec: prn_core::tensorops::ConvSpec,
    stride: usize,
    seed: u64,
    samples: usize,
) -> f64 {
    use prn_core::tensorops::{deconv2d_backward, deconv2d_forward};
    let mut rng = rng(seed);
    let input = rand_tensor(&mut rng, 1, spec.in_channels, 5, 6);
    let input64 = F64Tensor::from_tensor(&input);
    let params = random_layer(&mut rng, spec);
    let eps = 1e-3f32;
    let out = deconv2d_forward(&input, &params, stride).unwrap();
    let (gi, gw, gb) = deconv2d_backward(&input, &params, stride, &out).unwrap();

    let fwd_p = |p: &LayerParams| deconv_f64(&input64, p, stride);
    let fwd_x = |x: &F64Tensor| deconv_f64(x, &params, stride);
    let mut worst = 0.0f64;
    for &i in &sample_indices(&mut rng, gw.numel(), samples) {
        worst = worst.max(rel_err(gw.data()[i] as f64, fd_weight(&fwd_p, &params, i, eps)));
    }
    for (i, &g) in gb.iter().enumerate() {
        worst = worst.max(rel_err(g as f64, fd_bias(&fwd_p, &params, i, eps)));
    }
    for &i in &sample_indices(&mut rng, gi.numel(), samples) {
        worst = worst.max(rel_err(
            gi.data()[i] as f64,
            fd_input(&fwd_x, &input64, i, eps as f64),
        ));
    }
    worst
}
