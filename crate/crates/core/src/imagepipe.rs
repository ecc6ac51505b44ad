//! Image I/O, color-space handling, bicubic resampling, and the patch
//! cropper/reassembler that feeds and drains the network.
//!
//! Pixel data lives as f32 in [0, 1]; 8-bit views are produced on export
//! (clamped, rounded). Readers accept PNG and binary PGM/PPM (P5/P6).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{PrnError, Result};
use crate::tensorops::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    YCbCr,
}

impl ColorSpace {
    fn name(self) -> &'static str {
        match self {
            ColorSpace::Rgb => "RGB",
            ColorSpace::YCbCr => "YCbCr",
        }
    }
}

/// 3-channel image; interleaved f32 samples in [0, 1] plus a color-space tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    space: ColorSpace,
    data: Vec<f32>,
}

impl ColorImage {
    pub fn new(
        width: usize,
        height: usize,
        space: ColorSpace,
        data: Vec<f32>,
    ) -> Result<ColorImage> {
        if data.len() != width * height * 3 {
            return Err(PrnError::shape(
                "ColorImage::new",
                format!("{} samples", width * height * 3),
                format!("{} samples", data.len()),
            ));
        }
        Ok(ColorImage {
            width,
            height,
            space,
            data,
        })
    }

    /// Build from interleaved 8-bit RGB bytes.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<ColorImage> {
        if bytes.len() != width * height * 3 {
            return Err(PrnError::shape(
                "ColorImage::from_rgb8",
                format!("{} bytes", width * height * 3),
                format!("{} bytes", bytes.len()),
            ));
        }
        Ok(ColorImage {
            width,
            height,
            space: ColorSpace::Rgb,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    /// Export as interleaved 8-bit bytes (clamped to [0, 1], rounded).
    pub fn to_bytes8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Extract channel `c` (0..3) as a plane.
    pub fn channel(&self, c: usize) -> ImagePlane {
        assert!(c < 3);
        let data = self.data.chunks_exact(3).map(|px| px[c]).collect();
        ImagePlane {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Interleave three planes of equal size.
    pub fn from_channels(space: ColorSpace, ch: [&ImagePlane; 3]) -> Result<ColorImage> {
        let (w, h) = (ch[0].width, ch[0].height);
        if ch.iter().any(|p| p.width != w || p.height != h) {
            return Err(PrnError::shape(
                "ColorImage::from_channels",
                format!("{}x{}", w, h),
                "mismatched planes".to_string(),
            ));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for i in 0..w * h {
            data.push(ch[0].data[i]);
            data.push(ch[1].data[i]);
            data.push(ch[2].data[i]);
        }
        Ok(ColorImage {
            width: w,
            height: h,
            space,
            data,
        })
    }
}

/// Single-channel float plane, values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<ImagePlane> {
        if data.len() != width * height {
            return Err(PrnError::shape(
                "ImagePlane::new",
                format!("{} samples", width * height),
                format!("{} samples", data.len()),
            ));
        }
        Ok(ImagePlane {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> ImagePlane {
        ImagePlane {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut f32 {
        &mut self.data[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(1, 1, self.height, self.width, self.data.clone())
            .expect("plane dims are consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<ImagePlane> {
        let (n, c, h, w) = t.shape();
        if n != 1 || c != 1 {
            return Err(PrnError::shape(
                "ImagePlane::from_tensor",
                "1x1xHxW".to_string(),
                format!("{:?}", t.shape()),
            ));
        }
        ImagePlane::new(w, h, t.data().to_vec())
    }

    /// 8-bit export view: clamp to [0, 1], round.
    pub fn to_bytes8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Color conversion: BT.601 studio swing, the SR evaluation convention.
// ---------------------------------------------------------------------------

/// Forward matrix on [0,1] RGB, producing 255-unit YCbCr before offsets.
const BT601: [[f64; 3]; 3] = [
    [65.481, 128.553, 24.966],
    [-37.797, -74.203, 112.0],
    [112.0, -93.786, -18.214],
];
const BT601_OFFSET: [f64; 3] = [16.0, 128.0, 128.0];

#[allow(clippy::needless_range_loop)]
fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let c = |r: usize, s: usize| -> f64 {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (s1, s2) = ((s + 1) % 3, (s + 2) % 3);
        m[r1][s1] * m[r2][s2] - m[r1][s2] * m[r2][s1]
    };
    let mut inv = [[0.0; 3]; 3];
    for r in 0..3 {
        for s in 0..3 {
            inv[r][s] = c(s, r) / det; // adjugate transpose
        }
    }
    inv
}

/// RGB -> YCbCr. Y lands in [16/255, 235/255] for in-gamut input.
pub fn rgb_to_ycbcr(image: &ColorImage) -> Result<ColorImage> {
    if image.space != ColorSpace::Rgb {
        return Err(PrnError::WrongColorSpace {
            expected: ColorSpace::Rgb.name(),
            actual: image.space.name(),
        });
    }
    let mut data = Vec::with_capacity(image.data.len());
    for px in image.data.chunks_exact(3) {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        for row in 0..3 {
            let m = &BT601[row];
            let v = (BT601_OFFSET[row] + m[0] * r + m[1] * g + m[2] * b) / 255.0;
            data.push(v as f32);
        }
    }
    Ok(ColorImage {
        width: image.width,
        height: image.height,
        space: ColorSpace::YCbCr,
        data,
    })
}

/// YCbCr -> RGB, exact inverse of `rgb_to_ycbcr` up to float rounding.
pub fn ycbcr_to_rgb(image: &ColorImage) -> Result<ColorImage> {
    if image.space != ColorSpace::YCbCr {
        return Err(PrnError::WrongColorSpace {
            expected: ColorSpace::YCbCr.name(),
            actual: image.space.name(),
        });
    }
    let inv = invert3(&BT601);
    let mut data = Vec::with_capacity(image.data.len());
    for px in image.data.chunks_exact(3) {
        let y = px[0] as f64 * 255.0 - BT601_OFFSET[0];
        let cb = px[1] as f64 * 255.0 - BT601_OFFSET[1];
        let cr = px[2] as f64 * 255.0 - BT601_OFFSET[2];
        for row in &inv {
            data.push((row[0] * y + row[1] * cb + row[2] * cr) as f32);
        }
    }
    Ok(ColorImage {
        width: image.width,
        height: image.height,
        space: ColorSpace::Rgb,
        data,
    })
}

// ---------------------------------------------------------------------------
// Bicubic resampling (Catmull-Rom, a = -0.5, edge-clamped, half-pixel centers)
// ---------------------------------------------------------------------------

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

/// Resample one axis: `src` of length `in_len` with stride `src_stride`,
/// writing `out_len` samples with stride `dst_stride`.
fn resample_axis(
    src: &[f32],
    in_len: usize,
    src_stride: usize,
    dst: &mut [f32],
    out_len: usize,
    dst_stride: usize,
) {
    let ratio = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let x = (o as f64 + 0.5) * ratio - 0.5;
        let base = x.floor() as isize;
        let frac = x - base as f64;
        let mut acc = 0.0f64;
        for tap in -1..=2isize {
            let w = cubic(frac - tap as f64);
            let i = (base + tap).clamp(0, in_len as isize - 1) as usize;
            acc += w * src[i * src_stride] as f64;
        }
        dst[o * dst_stride] = acc as f32;
    }
}

/// Bicubic resize to (out_w, out_h). Separable: rows then columns.
/// Values are not clamped here; overshoot is clipped on 8-bit export.
pub fn bicubic_resize(plane: &ImagePlane, out_w: usize, out_h: usize) -> ImagePlane {
    assert!(out_w >= 1 && out_h >= 1, "output dims must be >= 1");
    if out_w == plane.width && out_h == plane.height {
        return plane.clone();
    }
    // Horizontal pass.
    let mut mid = vec![0.0f32; out_w * plane.height];
    for y in 0..plane.height {
        resample_axis(
            &plane.data[y * plane.width..(y + 1) * plane.width],
            plane.width,
            1,
            &mut mid[y * out_w..(y + 1) * out_w],
            out_w,
            1,
        );
    }
    // Vertical pass.
    let mut out = vec![0.0f32; out_w * out_h];
    for x in 0..out_w {
        resample_axis(
            &mid[x..],
            plane.height,
            out_w,
            &mut out[x..],
            out_h,
            out_w,
        );
    }
    ImagePlane {
        width: out_w,
        height: out_h,
        data: out,
    }
}

// ---------------------------------------------------------------------------
// Patch grid
// ---------------------------------------------------------------------------

/// Non-overlapping patch tiling of a mirror-padded plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    /// Original plane dims, before padding.
    pub width: usize,
    pub height: usize,
    /// Dims after padding up to a multiple of `patch_size`.
    pub padded_width: usize,
    pub padded_height: usize,
    /// Top-left (row, col) of each patch in the padded plane, row-major.
    pub origins: Vec<(usize, usize)>,
}

impl PatchGrid {
    pub fn pad_amounts(&self) -> (usize, usize) {
        (
            self.padded_height - self.height,
            self.padded_width - self.width,
        )
    }
}

/// Mirror index (symmetric reflection: edge sample repeats) with wraparound,
/// total for any pad amount and any plane size >= 1.
fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut q = i % period;
    if q < 0 {
        q += period;
    }
    if q < n {
        q as usize
    } else {
        (period - 1 - q) as usize
    }
}

/// Split a plane into non-overlapping `patch_size` tiles, mirror-padding on
/// the bottom/right up to a multiple of `patch_size`.
pub fn crop_patches(plane: &ImagePlane, patch_size: usize) -> Result<(PatchGrid, Vec<Tensor>)> {
    if plane.width == 0 || plane.height == 0 {
        return Err(PrnError::EmptyInput("crop_patches: zero-sized image"));
    }
    if patch_size == 0 {
        return Err(PrnError::InvalidConfig("patch_size must be >= 1".into()));
    }
    let padded_w = plane.width.div_ceil(patch_size) * patch_size;
    let padded_h = plane.height.div_ceil(patch_size) * patch_size;
    let mut origins = Vec::new();
    let mut patches = Vec::new();
    for row in (0..padded_h).step_by(patch_size) {
        for col in (0..padded_w).step_by(patch_size) {
            origins.push((row, col));
            let mut data = Vec::with_capacity(patch_size * patch_size);
            for y in 0..patch_size {
                let sy = mirror_index((row + y) as isize, plane.height);
                for x in 0..patch_size {
                    let sx = mirror_index((col + x) as isize, plane.width);
                    data.push(plane.data[sy * plane.width + sx]);
                }
            }
            patches.push(Tensor::from_vec(1, 1, patch_size, patch_size, data)?);
        }
    }
    Ok((
        PatchGrid {
            patch_size,
            width: plane.width,
            height: plane.height,
            padded_width: padded_w,
            padded_height: padded_h,
            origins,
        },
        patches,
    ))
}

/// Inverse of `crop_patches` with origins scaled by `factor`: place
/// `factor * patch_size` tiles and strip the (scaled) padding.
pub fn reassemble(grid: &PatchGrid, patches: &[Tensor], factor: usize) -> Result<ImagePlane> {
    if factor == 0 {
        return Err(PrnError::InvalidConfig("factor must be >= 1".into()));
    }
    if patches.len() != grid.origins.len() {
        return Err(PrnError::shape(
            "reassemble",
            format!("{} patches", grid.origins.len()),
            format!("{} patches", patches.len()),
        ));
    }
    let ps = grid.patch_size * factor;
    let canvas_w = grid.padded_width * factor;
    let canvas_h = grid.padded_height * factor;
    let mut canvas = vec![0.0f32; canvas_w * canvas_h];
    for (patch, &(row, col)) in patches.iter().zip(&grid.origins) {
        if patch.shape() != (1, 1, ps, ps) {
            return Err(PrnError::shape(
                "reassemble",
                format!("1x1x{}x{}", ps, ps),
                format!("{:?}", patch.shape()),
            ));
        }
        let (r0, c0) = (row * factor, col * factor);
        for y in 0..ps {
            let dst = &mut canvas[(r0 + y) * canvas_w + c0..(r0 + y) * canvas_w + c0 + ps];
            dst.copy_from_slice(&patch.data()[y * ps..(y + 1) * ps]);
        }
    }
    let out_w = grid.width * factor;
    let out_h = grid.height * factor;
    let mut data = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        data.extend_from_slice(&canvas[y * canvas_w..y * canvas_w + out_w]);
    }
    ImagePlane::new(out_w, out_h, data)
}

// ---------------------------------------------------------------------------
// File I/O: PNG plus binary PGM (P5) / PPM (P6)
// ---------------------------------------------------------------------------

/// Load a PNG or binary PNM image. 16-bit inputs are rejected; grayscale
/// is replicated to three channels.
pub fn load_image(path: &Path) -> Result<ColorImage> {
    let mut file = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 2];
    file.read_exact(&mut magic)?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    let mut bytes = magic.to_vec();
    bytes.extend_from_slice(&rest);
    match &magic {
        b"P5" | b"P6" => decode_pnm(&bytes),
        [0x89, b'P'] => decode_png(&bytes),
        _ => Err(PrnError::UnsupportedImage(format!(
            "unrecognized magic {:02x?} in {}",
            magic,
            path.display()
        ))),
    }
}

/// Save as PNG (.png), PPM (.ppm), or PGM (.pgm; luma of channel 0).
pub fn save_image(image: &ColorImage, path: &Path) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "png" => save_png(image, path),
        "ppm" => save_ppm(image, path),
        "pgm" => save_pgm(&image.channel(0), path),
        other => Err(PrnError::UnsupportedImage(format!(
            "unsupported output extension '{other}' (use png, ppm, or pgm)"
        ))),
    }
}

fn decode_png(bytes: &[u8]) -> Result<ColorImage> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| PrnError::Format(format!("png: {e}")))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(PrnError::UnsupportedImage(format!(
            "unsupported PNG bit depth {:?} (only 8-bit)",
            info.bit_depth
        )));
    }
    let color = info.color_type;
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| PrnError::Format("png: output too large".into()))?;
    let mut buf = vec![0u8; size];
    let out = reader
        .next_frame(&mut buf)
        .map_err(|e| PrnError::Format(format!("png: {e}")))?;
    buf.truncate(out.buffer_size());
    let rgb: Vec<u8> = match color {
        png::ColorType::Rgb => buf,
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        other => {
            return Err(PrnError::UnsupportedImage(format!(
                "unsupported PNG color type {other:?} (only RGB and grayscale)"
            )))
        }
    };
    ColorImage::from_rgb8(w, h, &rgb)
}

fn save_png(image: &ColorImage, path: &Path) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| PrnError::Format(format!("png: {e}")))?;
    writer
        .write_image_data(&image.to_bytes8())
        .map_err(|e| PrnError::Format(format!("png: {e}")))?;
    Ok(())
}

/// Consume PNM header tokens: skips whitespace and `#` comments.
fn pnm_token(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b' ' | b'\t' | b'\r' | b'\n' => *pos += 1,
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(PrnError::Format("pnm: expected integer in header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PrnError::Format("pnm: bad integer".into()))
}

fn decode_pnm(bytes: &[u8]) -> Result<ColorImage> {
    let channels = match &bytes[..2] {
        b"P5" => 1usize,
        b"P6" => 3usize,
        _ => return Err(PrnError::Format("pnm: bad magic".into())),
    };
    let mut pos = 2;
    let w = pnm_token(bytes, &mut pos)? as usize;
    let h = pnm_token(bytes, &mut pos)? as usize;
    let maxval = pnm_token(bytes, &mut pos)?;
    if maxval > 255 {
        return Err(PrnError::UnsupportedImage(format!(
            "unsupported PNM maxval {maxval} (only 8-bit)"
        )));
    }
    // Exactly one whitespace byte separates header from raster.
    if pos >= bytes.len() {
        return Err(PrnError::Format("pnm: truncated header".into()));
    }
    pos += 1;
    let need = w * h * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| PrnError::Format("pnm: truncated raster".into()))?;
    let rgb: Vec<u8> = if channels == 3 {
        raster.to_vec()
    } else {
        raster.iter().flat_map(|&g| [g, g, g]).collect()
    };
    ColorImage::from_rgb8(w, h, &rgb)
}

fn save_ppm(image: &ColorImage, path: &Path) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    write!(file, "P6\n{} {}\n255\n", image.width, image.height)?;
    file.write_all(&image.to_bytes8())?;
    Ok(())
}

/// Write a single plane as binary PGM.
pub fn save_pgm(plane: &ImagePlane, path: &Path) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    write!(file, "P5\n{} {}\n255\n", plane.width, plane.height)?;
    file.write_all(&plane.to_bytes8())?;
    Ok(())
}
