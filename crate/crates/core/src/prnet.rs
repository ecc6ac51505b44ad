//! The routed super-resolution model: stage parameter banks, the rolling
//! filter swap, the three exit paths, whole-image super-resolution,
//! checkpointing, and MAC accounting.
//!
//! Early/mid/late stages hold regular convolutions; the early and mid
//! stages also carry dilated twins. Severe patches run the full regular
//! path; mild and moderate patches run the dilated banks and exit straight
//! into the shared upsampler, so the short paths get a wide receptive
//! field without disturbing the full path's filters.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use crate::error::{PrnError, Result};
use crate::imagepipe::{
    bicubic_resize, crop_patches, reassemble, rgb_to_ycbcr, ycbcr_to_rgb, ColorImage, ColorSpace,
};
use crate::prior::{classify, gradient_prior, DifficultyTag, Thresholds};
use crate::tensorops::{
    bicubic_deconv_init, conv2d_forward_counted, deconv2d_forward_counted, leaky_relu,
    xavier_init, ConvSpec, LayerParams, Tensor,
};

/// Feature width of every hidden layer.
pub const CHANNELS: usize = 64;
/// Negative slope of every activation.
pub const LEAKY_SLOPE: f32 = 0.2;

/// Identifies one parameter bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageKind {
    Early,
    Mid,
    Late,
    EarlyDilated,
    MidDilated,
    Upsampler,
}

impl StageKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            StageKind::Early => 0,
            StageKind::Mid => 1,
            StageKind::Late => 2,
            StageKind::EarlyDilated => 3,
            StageKind::MidDilated => 4,
            StageKind::Upsampler => 5,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<StageKind> {
        Ok(match code {
            0 => StageKind::Early,
            1 => StageKind::Mid,
            2 => StageKind::Late,
            3 => StageKind::EarlyDilated,
            4 => StageKind::MidDilated,
            5 => StageKind::Upsampler,
            other => return Err(PrnError::Format(format!("bad stage code {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Early => "early",
            StageKind::Mid => "mid",
            StageKind::Late => "late",
            StageKind::EarlyDilated => "early_dilated",
            StageKind::MidDilated => "mid_dilated",
            StageKind::Upsampler => "upsampler",
        }
    }
}

/// A parameter bank read (or updated) by some path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamRef {
    Early,
    Mid,
    Late,
    EarlyDilated,
    MidDilated,
    Upsampler(usize),
}

/// Addresses one layer's parameters, for optimizer state and snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub kind: StageKind,
    pub layer: usize,
    /// Scale factor for upsampler entries, 0 otherwise.
    pub scale: usize,
}

/// Where the routed forward pass exits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStage {
    Early,
    Mid,
    Full,
}

impl From<DifficultyTag> for ExitStage {
    fn from(tag: DifficultyTag) -> ExitStage {
        match tag {
            DifficultyTag::Mild => ExitStage::Early,
            DifficultyTag::Moderate => ExitStage::Mid,
            DifficultyTag::Severe => ExitStage::Full,
        }
    }
}

/// Per-patch routing record.
#[derive(Debug, Clone)]
pub struct RouteTrace {
    pub tag: DifficultyTag,
    pub exit: ExitStage,
    /// Parameter banks read by the pass, in read order.
    pub touched: Vec<ParamRef>,
    /// Multiply-accumulates actually issued.
    pub macs: u64,
    pub wall: Duration,
}

/// All learnable banks of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    /// Regular head: 1 -> 64, 5x5 (extra layers 64 -> 64, 5x5).
    pub early: Vec<LayerParams>,
    /// Regular middle: 64 -> 64, 3x3.
    pub mid: Vec<LayerParams>,
    /// Regular tail: two 64 -> 64 3x3 plus the 1x1 shrink, all activated.
    pub late: Vec<LayerParams>,
    /// Dilated twin of `early`, used by mild/moderate routes when rolling.
    pub early_dilated: Vec<LayerParams>,
    /// Dilated twin of `mid`.
    pub mid_dilated: Vec<LayerParams>,
    /// One transposed-conv layer per trained scale (64 -> 1, stride = scale).
    pub upsamplers: BTreeMap<usize, LayerParams>,
}

/// Model construction knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub scales: Vec<usize>,
    pub thresholds: Thresholds,
    /// Dilation rate of the rolled banks (>= 2 widens the receptive field).
    pub dilation_rate: usize,
    /// Layer count of the early stage (default 1).
    pub depth_early: usize,
    /// Layer count of the mid stage (default 2).
    pub depth_mid: usize,
    /// When false the dilated banks are dropped and every route shares the
    /// regular early/mid filters (the no-rolling ablation).
    pub rolling: bool,
    /// Nominal HR patch edge; rounded up per scale for divisibility.
    pub base_patch: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            scales: vec![3],
            thresholds: Thresholds::default(),
            dilation_rate: 2,
            depth_early: 1,
            depth_mid: 2,
            rolling: true,
            base_patch: 54,
        }
    }
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(PrnError::EmptyInput("ModelConfig::scales"));
        }
        for &s in &self.scales {
            if !(2..=4).contains(&s) {
                return Err(PrnError::UnsupportedScale(s));
            }
        }
        if self.dilation_rate < 1 {
            return Err(PrnError::InvalidConfig("dilation_rate must be >= 1".into()));
        }
        if self.depth_early < 1 || self.depth_mid < 1 {
            return Err(PrnError::InvalidConfig("stage depths must be >= 1".into()));
        }
        if self.base_patch < 4 {
            return Err(PrnError::InvalidConfig("base_patch must be >= 4".into()));
        }
        Ok(())
    }
}

/// The full model: parameter banks plus routing state.
#[derive(Debug, Clone, PartialEq)]
pub struct PrnModel {
    pub stages: StageParams,
    pub thresholds: Thresholds,
    pub scales: Vec<usize>,
    pub dilation_rate: usize,
    pub rolling: bool,
    pub base_patch: usize,
}

fn layer_seed(base: u64, kind: StageKind, idx: usize) -> u64 {
    base ^ (kind.code() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (idx as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

impl PrnModel {
    /// Build a model with Xavier-initialized convolutions and
    /// bicubic-initialized upsamplers, deterministic per seed.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<PrnModel> {
        config.validate()?;
        let mut scales = config.scales.clone();
        scales.sort_unstable();
        scales.dedup();

        let conv =
            |kind: StageKind, idx: usize, cin: usize, k: usize, d: usize| -> LayerParams {
                xavier_init(ConvSpec::same(cin, CHANNELS, k, d), layer_seed(seed, kind, idx))
            };

        let early: Vec<LayerParams> = (0..config.depth_early)
            .map(|i| conv(StageKind::Early, i, if i == 0 { 1 } else { CHANNELS }, 5, 1))
            .collect();
        let mid: Vec<LayerParams> = (0..config.depth_mid)
            .map(|i| conv(StageKind::Mid, i, CHANNELS, 3, 1))
            .collect();
        let late = vec![
            conv(StageKind::Late, 0, CHANNELS, 3, 1),
            conv(StageKind::Late, 1, CHANNELS, 3, 1),
            // 1x1 shrink ahead of the upsampler.
            conv(StageKind::Late, 2, CHANNELS, 1, 1),
        ];
        let (early_dilated, mid_dilated) = if config.rolling {
            (
                (0..config.depth_early)
                    .map(|i| {
                        conv(
                            StageKind::EarlyDilated,
                            i,
                            if i == 0 { 1 } else { CHANNELS },
                            5,
                            config.dilation_rate,
                        )
                    })
                    .collect(),
                (0..config.depth_mid)
                    .map(|i| conv(StageKind::MidDilated, i, CHANNELS, 3, config.dilation_rate))
                    .collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let mut upsamplers = BTreeMap::new();
        for &s in &scales {
            upsamplers.insert(s, bicubic_deconv_init(s)?);
        }
        Ok(PrnModel {
            stages: StageParams {
                early,
                mid,
                late,
                early_dilated,
                mid_dilated,
                upsamplers,
            },
            thresholds: config.thresholds,
            scales,
            dilation_rate: config.dilation_rate,
            rolling: config.rolling,
            base_patch: config.base_patch,
        })
    }

    fn check_scale(&self, scale: usize) -> Result<()> {
        if !self.scales.contains(&scale) {
            return Err(PrnError::UnsupportedScale(scale));
        }
        Ok(())
    }

    /// HR patch edge for a scale: `base_patch` rounded up to a multiple.
    pub fn hr_patch_size(&self, scale: usize) -> usize {
        self.base_patch.div_ceil(scale) * scale
    }

    /// LR patch edge the network consumes for a scale.
    pub fn lr_patch_size(&self, scale: usize) -> usize {
        self.hr_patch_size(scale) / scale
    }

    /// Stage banks a tag's route reads, in order (upsampler excluded).
    pub fn route_kinds(&self, tag: DifficultyTag) -> Vec<StageKind> {
        match (tag, self.rolling) {
            (DifficultyTag::Mild, true) => vec![StageKind::EarlyDilated],
            (DifficultyTag::Mild, false) => vec![StageKind::Early],
            (DifficultyTag::Moderate, true) => vec![StageKind::EarlyDilated, StageKind::MidDilated],
            (DifficultyTag::Moderate, false) => vec![StageKind::Early, StageKind::Mid],
            (DifficultyTag::Severe, _) => vec![StageKind::Early, StageKind::Mid, StageKind::Late],
        }
    }

    fn stage(&self, kind: StageKind) -> &[LayerParams] {
        match kind {
            StageKind::Early => &self.stages.early,
            StageKind::Mid => &self.stages.mid,
            StageKind::Late => &self.stages.late,
            StageKind::EarlyDilated => &self.stages.early_dilated,
            StageKind::MidDilated => &self.stages.mid_dilated,
            StageKind::Upsampler => unreachable!("upsampler is addressed by scale"),
        }
    }

    /// Conv layers plus upsampler for one route.
    pub(crate) fn route_layers(
        &self,
        tag: DifficultyTag,
        scale: usize,
    ) -> Result<(Vec<(StageKind, &LayerParams)>, &LayerParams)> {
        self.check_scale(scale)?;
        let mut convs = Vec::new();
        for kind in self.route_kinds(tag) {
            for layer in self.stage(kind) {
                convs.push((kind, layer));
            }
        }
        let up = self
            .stages
            .upsamplers
            .get(&scale)
            .ok_or(PrnError::UnsupportedScale(scale))?;
        Ok((convs, up))
    }

    /// Mutable route parameters keyed for optimizer state; the upsampler is
    /// the final entry. Exactly these receive updates for a batch tag.
    pub(crate) fn route_params_mut(
        &mut self,
        tag: DifficultyTag,
        scale: usize,
    ) -> Result<Vec<(ParamKey, &mut LayerParams)>> {
        self.check_scale(scale)?;
        let kinds = self.route_kinds(tag);
        let mut out: Vec<(ParamKey, &mut LayerParams)> = Vec::new();
        let StageParams {
            early,
            mid,
            late,
            early_dilated,
            mid_dilated,
            upsamplers,
        } = &mut self.stages;
        // Each bank is taken at most once (route kinds never repeat).
        let mut early = Some(&mut early[..]);
        let mut mid = Some(&mut mid[..]);
        let mut late = Some(&mut late[..]);
        let mut early_dilated = Some(&mut early_dilated[..]);
        let mut mid_dilated = Some(&mut mid_dilated[..]);
        for kind in kinds {
            let bank: &mut [LayerParams] = match kind {
                StageKind::Early => early.take().expect("bank reused"),
                StageKind::Mid => mid.take().expect("bank reused"),
                StageKind::Late => late.take().expect("bank reused"),
                StageKind::EarlyDilated => early_dilated.take().expect("bank reused"),
                StageKind::MidDilated => mid_dilated.take().expect("bank reused"),
                StageKind::Upsampler => unreachable!(),
            };
            for (i, layer) in bank.iter_mut().enumerate() {
                out.push((
                    ParamKey {
                        kind,
                        layer: i,
                        scale: 0,
                    },
                    layer,
                ));
            }
        }
        let up = upsamplers
            .get_mut(&scale)
            .ok_or(PrnError::UnsupportedScale(scale))?;
        out.push((
            ParamKey {
                kind: StageKind::Upsampler,
                layer: 0,
                scale,
            },
            up,
        ));
        Ok(out)
    }

    /// Every parameter bank with its key, in checkpoint order.
    pub fn all_params(&self) -> Vec<(ParamKey, &LayerParams)> {
        let banks = [
            (StageKind::Early, &self.stages.early),
            (StageKind::Mid, &self.stages.mid),
            (StageKind::Late, &self.stages.late),
            (StageKind::EarlyDilated, &self.stages.early_dilated),
            (StageKind::MidDilated, &self.stages.mid_dilated),
        ];
        let mut out = Vec::new();
        for (kind, bank) in banks {
            for (i, layer) in bank.iter().enumerate() {
                out.push((
                    ParamKey {
                        kind,
                        layer: i,
                        scale: 0,
                    },
                    layer,
                ));
            }
        }
        for (&s, layer) in &self.stages.upsamplers {
            out.push((
                ParamKey {
                    kind: StageKind::Upsampler,
                    layer: 0,
                    scale: s,
                },
                layer,
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Routed forward passes
// ---------------------------------------------------------------------------

fn check_lr_patch(patch: &Tensor) -> Result<()> {
    let (n, c, _, _) = patch.shape();
    if n != 1 || c != 1 {
        return Err(PrnError::shape(
            "routed forward",
            "1x1xHxW LR patch".to_string(),
            format!("{:?}", patch.shape()),
        ));
    }
    Ok(())
}

fn run_route(
    patch: &Tensor,
    model: &PrnModel,
    scale: usize,
    tag: DifficultyTag,
) -> Result<(Tensor, RouteTrace)> {
    check_lr_patch(patch)?;
    let (convs, up) = model.route_layers(tag, scale)?;
    let start = Instant::now();
    let mut macs = 0u64;
    let mut touched: Vec<ParamRef> = Vec::new();
    let mut x = patch.clone();
    let mut last_kind = None;
    for (kind, layer) in convs {
        x = leaky_relu(&conv2d_forward_counted(&x, layer, &mut macs)?, LEAKY_SLOPE);
        if last_kind != Some(kind) {
            touched.push(match kind {
                StageKind::Early => ParamRef::Early,
                StageKind::Mid => ParamRef::Mid,
                StageKind::Late => ParamRef::Late,
                StageKind::EarlyDilated => ParamRef::EarlyDilated,
                StageKind::MidDilated => ParamRef::MidDilated,
                StageKind::Upsampler => unreachable!(),
            });
            last_kind = Some(kind);
        }
    }
    let out = deconv2d_forward_counted(&x, up, scale, &mut macs)?;
    touched.push(ParamRef::Upsampler(scale));
    Ok((
        out,
        RouteTrace {
            tag,
            exit: tag.into(),
            touched,
            macs,
            wall: start.elapsed(),
        },
    ))
}

/// Early exit: dilated head straight into the upsampler.
pub fn forward_mild(
    patch: &Tensor,
    model: &PrnModel,
    scale: usize,
) -> Result<(Tensor, RouteTrace)> {
    run_route(patch, model, scale, DifficultyTag::Mild)
}

/// Middle exit: dilated head and middle, then the upsampler.
pub fn forward_moderate(
    patch: &Tensor,
    model: &PrnModel,
    scale: usize,
) -> Result<(Tensor, RouteTrace)> {
    run_route(patch, model, scale, DifficultyTag::Moderate)
}

/// Full path: regular head, middle, tail (with shrink), then the upsampler.
pub fn forward_severe(
    patch: &Tensor,
    model: &PrnModel,
    scale: usize,
) -> Result<(Tensor, RouteTrace)> {
    run_route(patch, model, scale, DifficultyTag::Severe)
}

/// Route by the patch's own gradient prior.
pub fn forward_routed(
    patch: &Tensor,
    model: &PrnModel,
    scale: usize,
) -> Result<(Tensor, RouteTrace)> {
    let p = gradient_prior(patch)?;
    run_route(patch, model, scale, classify(p, &model.thresholds))
}

/// Timing companion of a whole-image pass.
#[derive(Debug, Clone)]
pub struct ImageTrace {
    pub patches: Vec<RouteTrace>,
    /// Time spent stitching SR patches back together.
    pub reassembly: Duration,
    pub total: Duration,
}

impl ImageTrace {
    pub fn total_macs(&self) -> u64 {
        self.patches.iter().map(|t| t.macs).sum()
    }

    pub fn tag_counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for t in &self.patches {
            counts[t.tag.index()] += 1;
        }
        counts
    }
}

/// Super-resolve a whole image: the luminance goes through the routed
/// network patchwise; chrominance is upscaled by bicubic. Output dims are
/// exactly `scale` times the input.
pub fn super_resolve_image(
    image: &ColorImage,
    model: &PrnModel,
    scale: usize,
) -> Result<(ColorImage, ImageTrace)> {
    model.check_scale(scale)?;
    let start = Instant::now();
    let was_rgb = image.space() == ColorSpace::Rgb;
    let ycc = if was_rgb {
        rgb_to_ycbcr(image)?
    } else {
        image.clone()
    };
    let y = ycc.channel(0);
    let lr_ps = model.lr_patch_size(scale);
    let (grid, patches) = crop_patches(&y, lr_ps)?;
    let mut traces = Vec::with_capacity(patches.len());
    let mut sr_patches = Vec::with_capacity(patches.len());
    for patch in &patches {
        let (sr, trace) = forward_routed(patch, model, scale)?;
        sr_patches.push(sr);
        traces.push(trace);
    }
    let t_reassemble = Instant::now();
    let y_sr = reassemble(&grid, &sr_patches, scale)?;
    let reassembly = t_reassemble.elapsed();

    let (out_w, out_h) = (image.width() * scale, image.height() * scale);
    let cb_sr = bicubic_resize(&ycc.channel(1), out_w, out_h);
    let cr_sr = bicubic_resize(&ycc.channel(2), out_w, out_h);
    let merged = ColorImage::from_channels(ColorSpace::YCbCr, [&y_sr, &cb_sr, &cr_sr])?;
    let out = if was_rgb { ycbcr_to_rgb(&merged)? } else { merged };
    Ok((
        out,
        ImageTrace {
            patches: traces,
            reassembly,
            total: start.elapsed(),
        },
    ))
}

// ---------------------------------------------------------------------------
// MAC accounting
// ---------------------------------------------------------------------------

/// Exact multiply-accumulate count of the scatter geometry used by
/// `deconv2d_forward`, from shapes alone.
fn deconv_mac_count(h: usize, w: usize, spec: &ConvSpec, stride: usize) -> u64 {
    let (kh, kw) = spec.kernel;
    let count_axis = |len: usize, k: usize| -> u64 {
        let out = stride * len;
        let d = (k - stride) / 2;
        let mut valid = 0u64;
        for i in 0..len {
            let base = (stride * i + k - 1) as isize - d as isize;
            for kk in 0..k {
                let o = base - kk as isize;
                if o >= 0 && o < out as isize {
                    valid += 1;
                }
            }
        }
        valid
    };
    count_axis(h, kh) * count_axis(w, kw) * (spec.in_channels * spec.out_channels) as u64
}

/// Closed-form MAC count of one routed path over an (lr_h, lr_w) patch.
/// Matches the instrumented counters of the forward ops exactly.
pub fn count_flops(
    model: &PrnModel,
    tag: DifficultyTag,
    lr_h: usize,
    lr_w: usize,
    scale: usize,
) -> Result<u64> {
    if lr_h == 0 || lr_w == 0 {
        return Err(PrnError::EmptyInput("count_flops: zero-size patch"));
    }
    let (convs, up) = model.route_layers(tag, scale)?;
    let (mut h, mut w) = (lr_h, lr_w);
    let mut macs = 0u64;
    for (_, layer) in convs {
        let spec = &layer.spec;
        let (oh, ow) = spec.out_dims(h, w)?;
        macs += (spec.out_channels
            * spec.in_channels
            * spec.kernel.0
            * spec.kernel.1
            * oh
            * ow) as u64;
        h = oh;
        w = ow;
    }
    macs += deconv_mac_count(h, w, &up.spec, scale);
    Ok(macs)
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------
//
// magic "PRN1"
// header (little-endian):
//   u16 version (= 1)
//   u8  rolling
//   u16 dilation_rate
//   u16 depth_early, u16 depth_mid
//   u16 base_patch
//   f32 gamma_upper, f32 gamma_low
//   u16 n_scales, u16 scale...
//   u32 n_layers, then per layer:
//     u8 stage_code, u16 layer_idx, u16 scale,
//     u16 out_ch, u16 in_ch, u16 kh, u16 kw,
//     u16 dilation, u16 stride, u16 pad_top, pad_bottom, pad_left, pad_right
// payload: per layer in table order, weight f32s then bias f32s
// u32 crc32 over everything after the magic.

const CHECKPOINT_MAGIC: &[u8; 4] = b"PRN1";
const CHECKPOINT_VERSION: u16 = 1;

struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| PrnError::Format("checkpoint truncated".into()))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn encode_model(model: &PrnModel) -> Vec<u8> {
    let mut w = ByteWriter(Vec::new());
    w.u16(CHECKPOINT_VERSION);
    w.u8(model.rolling as u8);
    w.u16(model.dilation_rate as u16);
    w.u16(model.stages.early.len() as u16);
    w.u16(model.stages.mid.len() as u16);
    w.u16(model.base_patch as u16);
    w.f32(model.thresholds.gamma_upper);
    w.f32(model.thresholds.gamma_low);
    w.u16(model.scales.len() as u16);
    for &s in &model.scales {
        w.u16(s as u16);
    }
    let params = model.all_params();
    w.u32(params.len() as u32);
    for (key, layer) in &params {
        let spec = &layer.spec;
        w.u8(key.kind.code());
        w.u16(key.layer as u16);
        w.u16(key.scale as u16);
        w.u16(spec.out_channels as u16);
        w.u16(spec.in_channels as u16);
        w.u16(spec.kernel.0 as u16);
        w.u16(spec.kernel.1 as u16);
        w.u16(spec.dilation as u16);
        w.u16(spec.stride as u16);
        w.u16(spec.padding.top as u16);
        w.u16(spec.padding.bottom as u16);
        w.u16(spec.padding.left as u16);
        w.u16(spec.padding.right as u16);
    }
    for (_, layer) in &params {
        for &v in layer.weights.data() {
            w.f32(v);
        }
        for &v in &layer.bias {
            w.f32(v);
        }
    }
    let crc = crc32fast::hash(&w.0);
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&w.0);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Serialize the model (weights, thresholds, routing knobs) to a file.
/// The round trip is bit-exact.
pub fn save_checkpoint(model: &PrnModel, path: &Path) -> Result<()> {
    let bytes = encode_model(model);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Load a checkpoint written by `save_checkpoint`.
pub fn load_checkpoint(path: &Path) -> Result<PrnModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}

fn decode_model(bytes: &[u8]) -> Result<PrnModel> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(PrnError::Format("bad checkpoint magic".into()));
    }
    let body = &bytes[4..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(PrnError::ChecksumMismatch { stored, computed });
    }
    let mut r = ByteReader { buf: body, pos: 0 };
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(PrnError::VersionMismatch(version, CHECKPOINT_VERSION));
    }
    let rolling = r.u8()? != 0;
    let dilation_rate = r.u16()? as usize;
    let depth_early = r.u16()? as usize;
    let depth_mid = r.u16()? as usize;
    let base_patch = r.u16()? as usize;
    let gamma_upper = r.f32()?;
    let gamma_low = r.f32()?;
    let n_scales = r.u16()? as usize;
    let mut scales = Vec::with_capacity(n_scales);
    for _ in 0..n_scales {
        scales.push(r.u16()? as usize);
    }
    let n_layers = r.u32()? as usize;
    let mut table = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = StageKind::from_code(r.u8()?)?;
        let layer_idx = r.u16()? as usize;
        let scale = r.u16()? as usize;
        let out_ch = r.u16()? as usize;
        let in_ch = r.u16()? as usize;
        let kh = r.u16()? as usize;
        let kw = r.u16()? as usize;
        let dilation = r.u16()? as usize;
        let stride = r.u16()? as usize;
        let (pt, pb, pl, pr) = (
            r.u16()? as usize,
            r.u16()? as usize,
            r.u16()? as usize,
            r.u16()? as usize,
        );
        table.push((
            ParamKey {
                kind,
                layer: layer_idx,
                scale,
            },
            ConvSpec {
                in_channels: in_ch,
                out_channels: out_ch,
                kernel: (kh, kw),
                dilation,
                stride,
                padding: crate::tensorops::Padding {
                    top: pt,
                    bottom: pb,
                    left: pl,
                    right: pr,
                },
            },
        ));
    }
    let mut stages = StageParams {
        early: Vec::new(),
        mid: Vec::new(),
        late: Vec::new(),
        early_dilated: Vec::new(),
        mid_dilated: Vec::new(),
        upsamplers: BTreeMap::new(),
    };
    for (key, spec) in table {
        let count = spec.out_channels * spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let mut wdata = Vec::with_capacity(count);
        for _ in 0..count {
            wdata.push(r.f32()?);
        }
        let mut bias = Vec::with_capacity(spec.out_channels);
        for _ in 0..spec.out_channels {
            bias.push(r.f32()?);
        }
        let weights = Tensor::from_vec(
            spec.out_channels,
            spec.in_channels,
            spec.kernel.0,
            spec.kernel.1,
            wdata,
        )?;
        let layer = LayerParams::new(spec, weights, bias)?;
        match key.kind {
            StageKind::Early => stages.early.push(layer),
            StageKind::Mid => stages.mid.push(layer),
            StageKind::Late => stages.late.push(layer),
            StageKind::EarlyDilated => stages.early_dilated.push(layer),
            StageKind::MidDilated => stages.mid_dilated.push(layer),
            StageKind::Upsampler => {
                stages.upsamplers.insert(key.scale, layer);
            }
        }
    }
    if r.pos != body.len() {
        return Err(PrnError::Format("checkpoint has trailing bytes".into()));
    }
    if stages.early.len() != depth_early || stages.mid.len() != depth_mid {
        return Err(PrnError::Format(
            "checkpoint layer table disagrees with header depths".into(),
        ));
    }
    for &s in &scales {
        if !stages.upsamplers.contains_key(&s) {
            return Err(PrnError::Format(format!(
                "checkpoint missing upsampler for scale {s}"
            )));
        }
    }
    // gamma values were validated when the model was built; re-validate.
    let thresholds = if gamma_upper.is_infinite() && gamma_low.is_infinite() {
        Thresholds::all_mild()
    } else {
        Thresholds::new(gamma_upper, gamma_low)?
    };
    Ok(PrnModel {
        stages,
        thresholds,
        scales,
        dilation_rate,
        rolling,
        base_patch,
    })
}
