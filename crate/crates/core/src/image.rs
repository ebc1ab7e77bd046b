//! Image containers, bilinear sampling, pyramids and masked metrics.
//!
//! Pixel values live in `[0, 1]` and are stored as `f64`, row-major with
//! interleaved channels.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Smallest width or height any pyramid level may have.
pub const MIN_LEVEL_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("expected 1 or 3 channels, got {channels}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage("empty image".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidImage(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Single-channel image filled with `value` (clamped into `[0, 1]`).
    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value.clamp(0.0, 1.0); width * height * channels],
        }
    }

    /// Builds a single-channel image from `f(x, y)`; values are clamped into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        let mut data = vec![0.0; width * height];
        data.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
            for (x, v) in row.iter_mut().enumerate() {
                *v = f(x, y).clamp(0.0, 1.0);
            }
        });
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub(crate) fn from_raw_unchecked(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Luminance (0.299 R + 0.587 G + 0.114 B); single-channel images are returned as-is.
    pub fn luminance(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect();
        Self::from_raw_unchecked(self.width, self.height, 1, data)
    }

    /// Multiplies every pixel by the mask value at the same location.
    pub fn masked(&self, mask: &Mask) -> ImageBuffer {
        let c = self.channels;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * mask.data[i / c])
            .collect();
        Self::from_raw_unchecked(self.width, self.height, c, data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let dynimg = image::open(path).map_err(|source| match source {
            image::ImageError::IoError(e) => Error::Io {
                path: path.to_path_buf(),
                source: e,
            },
            source => Error::Codec {
                path: path.to_path_buf(),
                source,
            },
        })?;
        let (width, height) = (dynimg.width() as usize, dynimg.height() as usize);
        let color = dynimg.color();
        let (channels, bytes) = if color.has_color() {
            (3, dynimg.to_rgb8().into_raw())
        } else {
            (1, dynimg.to_luma8().into_raw())
        };
        let data = bytes.into_iter().map(|b| b as f64 / 255.0).collect();
        Self::new(width, height, channels, data)
    }

    /// Quantizes to 8 bits.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Writes an 8-bit PNG, PGM or PPM depending on the extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let color = if self.channels == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("pgm") | Some("ppm") | Some("pnm") => image::ImageFormat::Pnm,
            _ => image::ImageFormat::Png,
        };
        image::save_buffer_with_format(
            path,
            &self.to_bytes(),
            self.width as u32,
            self.height as u32,
            color,
            format,
        )
        .map_err(|source| Error::Codec {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Per-pixel weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "mask data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("mask value {v} outside [0,1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1.0; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub(crate) fn from_raw_unchecked(width: usize, height: usize, data: Vec<f64>) -> Self {
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer::from_raw_unchecked(self.width, self.height, 1, self.data.clone())
    }
}

/// Coarse-to-fine stack, level 0 at full resolution.
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<ImageBuffer>,
}

impl Pyramid {
    pub fn levels(&self) -> &[ImageBuffer] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> &ImageBuffer {
        &self.levels[k]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn coarsest(&self) -> &ImageBuffer {
        self.levels.last().expect("pyramid has at least one level")
    }
}

const LATTICE_SNAP: f64 = 1e-9;

/// Bilinear interpolation into `out` (one value per channel).
///
/// Returns `false` and writes zeros when `(x, y)` lies outside
/// `[0, width-1] x [0, height-1]`.
#[inline]
pub fn sample_bilinear_into(img: &ImageBuffer, x: f64, y: f64, out: &mut [f64]) -> bool {
    let (w, h) = (img.width, img.height);
    let (x, y) = (snap_to_lattice(x), snap_to_lattice(y));
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        out.iter_mut().for_each(|v| *v = 0.0);
        return false;
    }
    let (x0, fx) = split_coord(x, w);
    let (y0, fy) = split_coord(y, h);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let c = img.channels;
    let d = &img.data;
    let i00 = (y0 * w + x0) * c;
    let i10 = (y0 * w + x1) * c;
    let i01 = (y1 * w + x0) * c;
    let i11 = (y1 * w + x1) * c;
    for (k, o) in out.iter_mut().enumerate().take(c) {
        let top = d[i00 + k] * (1.0 - fx) + d[i10 + k] * fx;
        let bottom = d[i01 + k] * (1.0 - fx) + d[i11 + k] * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
    true
}

/// Bilinear interpolation returning per-channel values and the validity flag.
pub fn sample_bilinear(img: &ImageBuffer, x: f64, y: f64) -> (Vec<f64>, bool) {
    let mut out = vec![0.0; img.channels];
    let valid = sample_bilinear_into(img, x, y, &mut out);
    (out, valid)
}

/// Single-channel bilinear sample together with its partial derivatives in
/// `x` and `y`. On cell boundaries the derivative of the cell to the
/// lower-right is used. Returns `None` out of canvas.
#[inline]
pub(crate) fn sample_gray_with_grad(img: &ImageBuffer, x: f64, y: f64) -> Option<(f64, f64, f64)> {
    debug_assert_eq!(img.channels, 1);
    let (w, h) = (img.width, img.height);
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let (x0, fx) = split_coord(x, w);
    let (y0, fy) = split_coord(y, h);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let d = &img.data;
    let p00 = d[y0 * w + x0];
    let p10 = d[y0 * w + x1];
    let p01 = d[y1 * w + x0];
    let p11 = d[y1 * w + x1];
    let top = p00 * (1.0 - fx) + p10 * fx;
    let bottom = p01 * (1.0 - fx) + p11 * fx;
    let v = top * (1.0 - fy) + bottom * fy;
    let gx = (p10 - p00) * (1.0 - fy) + (p11 - p01) * fy;
    let gy = bottom - top;
    Some((v, gx, gy))
}

/// Rounds coordinates within rounding noise of a pixel center, so that a
/// numerically recovered identity reproduces the source exactly.
#[inline]
fn snap_to_lattice(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < LATTICE_SNAP {
        r
    } else {
        x
    }
}

#[inline]
fn split_coord(x: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let x0 = (x.floor() as usize).min(n - 2);
    (x0, x - x0 as f64)
}

/// 2x2 box filter followed by 2x subsampling (floor on odd sizes).
pub fn downsample_half(img: &ImageBuffer) -> ImageBuffer {
    let (w, h, c) = (img.width / 2, img.height / 2, img.channels);
    let sw = img.width;
    let src = &img.data;
    let mut data = vec![0.0; w * h * c];
    data.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            for k in 0..c {
                let a = src[((2 * y) * sw + 2 * x) * c + k];
                let b = src[((2 * y) * sw + 2 * x + 1) * c + k];
                let cc = src[((2 * y + 1) * sw + 2 * x) * c + k];
                let d = src[((2 * y + 1) * sw + 2 * x + 1) * c + k];
                row[x * c + k] = ((a + b) + (cc + d)) * 0.25;
            }
        }
    });
    ImageBuffer::from_raw_unchecked(w, h, c, data)
}

pub fn build_pyramid(img: &ImageBuffer, levels: usize) -> Result<Pyramid> {
    if levels == 0 {
        return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
    }
    let shift = levels - 1;
    let (cw, ch) = (img.width >> shift, img.height >> shift);
    if cw < MIN_LEVEL_SIZE || ch < MIN_LEVEL_SIZE {
        return Err(Error::TooCoarse {
            level: shift,
            width: cw,
            height: ch,
        });
    }
    let mut out = Vec::with_capacity(levels);
    out.push(img.clone());
    for k in 1..levels {
        let next = downsample_half(&out[k - 1]);
        out.push(next);
    }
    Ok(Pyramid { levels: out })
}

/// Mask-weighted mean squared difference over all channels.
pub fn masked_mse(a: &ImageBuffer, b: &ImageBuffer, mask: &Mask) -> Result<f64> {
    if !a.same_dims(b) || a.channels != b.channels {
        return Err(Error::DimensionMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    if mask.width != a.width || mask.height != a.height {
        return Err(Error::DimensionMismatch("mask does not match image".into()));
    }
    let c = a.channels;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &m) in mask.data.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let mut s = 0.0;
        for k in 0..c {
            let d = a.data[i * c + k] - b.data[i * c + k];
            s += d * d;
        }
        num += m * s;
        den += m * c as f64;
    }
    if den <= 0.0 {
        return Err(Error::EmptyMask);
    }
    Ok(num / den)
}

/// PSNR in dB over the masked region; `f64::INFINITY` when the images agree.
pub fn psnr_masked(a: &ImageBuffer, b: &ImageBuffer, mask: &Mask) -> Result<f64> {
    let mse = masked_mse(a, b, mask)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}
