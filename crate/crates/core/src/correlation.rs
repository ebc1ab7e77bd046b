//! Patch features, global and local correlation volumes, and flow readout.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Channels per cell: 9 intensities followed by 9 x-gradients and 9 y-gradients.
pub const FEATURE_CHANNELS: usize = 27;

const NORM_EPS: f64 = 1e-12;

/// Magic prefix of the correlation debug dump.
pub const DUMP_MAGIC: &[u8; 8] = b"EDFFDCOR";

/// Row-major cell features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "feature data length {} for {width}x{height}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
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

    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    fn same_shape(&self, other: &FeatureMap) -> Result<()> {
        if self.width != other.width || self.height != other.height || self.channels != other.channels {
            return Err(Error::DimensionMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(())
    }

    /// Copy with every cell scaled to unit length (zero cells stay zero).
    fn unit(&self) -> Vec<f64> {
        let mut out = self.data.clone();
        for cell in out.chunks_exact_mut(self.channels) {
            let n = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < NORM_EPS {
                cell.iter_mut().for_each(|v| *v = 0.0);
            } else {
                cell.iter_mut().for_each(|v| *v /= n);
            }
        }
        out
    }
}

/// Deterministic patch descriptor on a `downsample`-pixel cell lattice.
///
/// Luminance is box-averaged over each cell. The descriptor of a cell is the
/// 3x3 neighborhood of cell averages (mean removed) together with their
/// central-difference gradients, scaled to unit length.
pub fn extract_features(img: &ImageBuffer, downsample: usize) -> Result<FeatureMap> {
    if downsample == 0 || img.width() < downsample || img.height() < downsample {
        return Err(Error::TooSmall(format!(
            "{}x{} image at downsample {downsample}",
            img.width(),
            img.height()
        )));
    }
    let lum = img.luminance();
    let (cw, ch) = (img.width() / downsample, img.height() / downsample);
    let iw = img.width();
    let area = (downsample * downsample) as f64;
    let mut block = vec![0.0; cw * ch];
    block.par_chunks_mut(cw).enumerate().for_each(|(cy, row)| {
        for (cx, v) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for y in cy * downsample..(cy + 1) * downsample {
                let start = y * iw + cx * downsample;
                s += lum.data()[start..start + downsample].iter().sum::<f64>();
            }
            *v = s / area;
        }
    });
    let at = |x: isize, y: isize| -> f64 {
        let x = x.clamp(0, cw as isize - 1) as usize;
        let y = y.clamp(0, ch as isize - 1) as usize;
        block[y * cw + x]
    };
    let mut data = vec![0.0; cw * ch * FEATURE_CHANNELS];
    data.par_chunks_mut(cw * FEATURE_CHANNELS)
        .enumerate()
        .for_each(|(cy, row)| {
            for cx in 0..cw {
                let f = &mut row[cx * FEATURE_CHANNELS..(cx + 1) * FEATURE_CHANNELS];
                let mut k = 0;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (x, y) = (cx as isize + dx, cy as isize + dy);
                        f[k] = at(x, y);
                        f[9 + k] = 0.5 * (at(x + 1, y) - at(x - 1, y));
                        f[18 + k] = 0.5 * (at(x, y + 1) - at(x, y - 1));
                        k += 1;
                    }
                }
                let mean = f[..9].iter().sum::<f64>() / 9.0;
                f[..9].iter_mut().for_each(|v| *v -= mean);
                let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < NORM_EPS {
                    f.iter_mut().for_each(|v| *v = 0.0);
                } else {
                    f.iter_mut().for_each(|v| *v /= n);
                }
            }
        });
    Ok(FeatureMap {
        width: cw,
        height: ch,
        channels: FEATURE_CHANNELS,
        data,
    })
}

/// Patch-to-patch cosine scores of every reference cell against every target cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalCorrelationVolume {
    width: usize,
    height: usize,
    scores: Vec<f32>,
}

impl GlobalCorrelationVolume {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// Scores of reference cell `(x, y)` against all target cells, row-major.
    pub fn row(&self, x: usize, y: usize) -> &[f32] {
        let n = self.cells();
        let i = (y * self.width + x) * n;
        &self.scores[i..i + n]
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn write_dump(&self, w: impl Write) -> Result<()> {
        write_dump(w, self.width, self.height, self.cells(), &self.scores)
    }
}

/// Sum over the `k x k` patch offsets of the cosine between the reference and
/// target features at corresponding positions. Offsets falling off either map
/// contribute 0, as do zero-length feature vectors.
pub fn global_correlation(fr: &FeatureMap, ft: &FeatureMap, k: usize) -> Result<GlobalCorrelationVolume> {
    fr.same_shape(ft)?;
    if k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("patch size {k} must be odd")));
    }
    let (w, h, c) = (fr.width, fr.height, fr.channels);
    let n = w * h;
    let ur = fr.unit();
    let ut = ft.unit();
    // Cell-to-cell cosine table.
    let mut dots = vec![0.0f64; n * n];
    dots.par_chunks_mut(n).enumerate().for_each(|(r, row)| {
        let a = &ur[r * c..(r + 1) * c];
        for (t, v) in row.iter_mut().enumerate() {
            let b = &ut[t * c..(t + 1) * c];
            *v = a.iter().zip(b).map(|(p, q)| p * q).sum();
        }
    });
    let half = (k / 2) as isize;
    let mut scores = vec![0.0f32; n * n];
    scores.par_chunks_mut(n).enumerate().for_each(|(r, row)| {
        let (rx, ry) = ((r % w) as isize, (r / w) as isize);
        for (t, out) in row.iter_mut().enumerate() {
            let (tx, ty) = ((t % w) as isize, (t / w) as isize);
            let mut s = 0.0;
            for j in -half..=half {
                let (ry2, ty2) = (ry + j, ty + j);
                if ry2 < 0 || ty2 < 0 || ry2 >= h as isize || ty2 >= h as isize {
                    continue;
                }
                for i in -half..=half {
                    let (rx2, tx2) = (rx + i, tx + i);
                    if rx2 < 0 || tx2 < 0 || rx2 >= w as isize || tx2 >= w as isize {
                        continue;
                    }
                    let ri = ry2 as usize * w + rx2 as usize;
                    let ti = ty2 as usize * w + tx2 as usize;
                    s += dots[ri * n + ti];
                }
            }
            *out = s as f32;
        }
    });
    Ok(GlobalCorrelationVolume {
        width: w,
        height: h,
        scores,
    })
}

/// Per-cell displacement in cells and the probability of the winning match.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    width: usize,
    height: usize,
    vectors: Vec<[f64; 2]>,
    confidence: Vec<f64>,
}

impl Flow {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        self.vectors[y * self.width + x]
    }

    #[inline]
    pub fn confidence(&self, x: usize, y: usize) -> f64 {
        self.confidence[y * self.width + x]
    }

    pub fn vectors(&self) -> &[[f64; 2]] {
        &self.vectors
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidence
    }
}

/// Softmax of `alpha * scores`, summed in index order.
pub fn softmax(scores: &[f64], alpha: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (alpha * (s - max)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Hard argmax of the alpha-scaled softmax over every target cell; ties go to
/// the smallest row-major target index.
pub fn volume_to_flow(vol: &GlobalCorrelationVolume, alpha: f64) -> Result<Flow> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let (w, n) = (vol.width, vol.cells());
    let (vectors, confidence): (Vec<[f64; 2]>, Vec<f64>) = (0..n)
        .into_par_iter()
        .map(|r| {
            let row = &vol.scores[r * n..(r + 1) * n];
            let mut best = 0;
            for (t, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = t;
                }
            }
            let max = row[best] as f64;
            let z: f64 = row.iter().map(|&s| (alpha * (s as f64 - max)).exp()).sum();
            let flow = [(best % w) as f64 - (r % w) as f64, (best / w) as f64 - (r / w) as f64];
            (flow, 1.0 / z)
        })
        .unzip();
    Ok(Flow {
        width: w,
        height: vol.height,
        vectors,
        confidence,
    })
}

/// Dot products of each reference cell against the `(2r+1)^2` target cells
/// around the same position.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCorrelationVolume {
    width: usize,
    height: usize,
    radius: usize,
    scores: Vec<f64>,
}

impl LocalCorrelationVolume {
    pub fn new(width: usize, height: usize, radius: usize, scores: Vec<f64>) -> Result<Self> {
        let win = (2 * radius + 1).pow(2);
        if scores.len() != width * height * win {
            return Err(Error::DimensionMismatch(format!(
                "{} scores for {width}x{height} cells with window {win}",
                scores.len()
            )));
        }
        Ok(Self {
            width,
            height,
            radius,
            scores,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn window(&self) -> usize {
        (2 * self.radius + 1).pow(2)
    }

    /// Window scores of cell `(x, y)`, offsets ordered with `dy` outer and `dx` inner.
    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let win = self.window();
        let i = (y * self.width + x) * win;
        &self.scores[i..i + win]
    }

    /// Offset `(dx, dy)` of window slot `k`.
    pub fn offset(&self, k: usize) -> (isize, isize) {
        let side = 2 * self.radius + 1;
        let r = self.radius as isize;
        ((k % side) as isize - r, (k / side) as isize - r)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn write_dump(&self, w: impl Write) -> Result<()> {
        let s: Vec<f32> = self.scores.iter().map(|&v| v as f32).collect();
        write_dump(w, self.width, self.height, self.window(), &s)
    }
}

pub fn local_correlation(fr: &FeatureMap, ft_warped: &FeatureMap, radius: usize) -> Result<LocalCorrelationVolume> {
    fr.same_shape(ft_warped)?;
    if radius == 0 {
        return Err(Error::InvalidArgument("local radius must be at least 1".into()));
    }
    let (w, h, c) = (fr.width, fr.height, fr.channels);
    let side = 2 * radius + 1;
    let win = side * side;
    let r = radius as isize;
    let mut scores = vec![0.0; w * h * win];
    scores.par_chunks_mut(win).enumerate().for_each(|(p, out)| {
        let (px, py) = ((p % w) as isize, (p / w) as isize);
        let a = &fr.data[p * c..(p + 1) * c];
        for (k, o) in out.iter_mut().enumerate() {
            let (qx, qy) = (px + (k % side) as isize - r, py + (k / side) as isize - r);
            if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                continue;
            }
            let b = ft_warped.cell(qx as usize, qy as usize);
            *o = a.iter().zip(b).map(|(u, v)| u * v).sum();
        }
    });
    Ok(LocalCorrelationVolume {
        width: w,
        height: h,
        radius,
        scores,
    })
}

/// Soft-argmax over the window of the alpha-scaled softmax.
pub fn local_volume_to_flow(vol: &LocalCorrelationVolume, alpha: f64) -> Result<Flow> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let n = vol.width * vol.height;
    let win = vol.window();
    let (vectors, confidence): (Vec<[f64; 2]>, Vec<f64>) = (0..n)
        .into_par_iter()
        .map(|p| {
            let probs = softmax(&vol.scores[p * win..(p + 1) * win], alpha);
            let mut flow = [0.0; 2];
            let mut best = 0.0f64;
            for (k, &pr) in probs.iter().enumerate() {
                let (ox, oy) = vol.offset(k);
                flow[0] += pr * ox as f64;
                flow[1] += pr * oy as f64;
                best = best.max(pr);
            }
            (flow, best)
        })
        .unzip();
    Ok(Flow {
        width: vol.width,
        height: vol.height,
        vectors,
        confidence,
    })
}

fn write_dump(mut w: impl Write, width: usize, height: usize, depth: usize, data: &[f32]) -> Result<()> {
    let io = |source| Error::Io {
        path: "<correlation dump>".into(),
        source,
    };
    w.write_all(DUMP_MAGIC).map_err(io)?;
    for d in [width, height, depth] {
        w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(io)
}

/// A decoded correlation dump: `(width, height, depth, scores)`.
pub type CorrelationDump = (usize, usize, usize, Vec<f32>);

pub fn read_dump(mut r: impl Read) -> Result<CorrelationDump> {
    let io = |source| Error::Io {
        path: "<correlation dump>".into(),
        source,
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::InvalidArgument("not a correlation dump".into()));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(io)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let count = dims[0] * dims[1] * dims[2];
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(io)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((dims[0], dims[1], dims[2], data))
}

pub fn save_dump(path: impl AsRef<Path>, vol: &GlobalCorrelationVolume) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    vol.write_dump(std::io::BufWriter::new(f))
}
