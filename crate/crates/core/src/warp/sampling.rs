use rayon::prelude::*;

use super::ffd::DisplacementField;
use super::homography::Homography;
use crate::error::{Error, Result};
use crate::image::{sample_bilinear_into, ImageBuffer, Mask};

/// How residual displacement fields combine with the homography.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Composition {
    /// `source = H(x) + sum_i D_i(x)`.
    #[default]
    Additive,
    /// Fields are chained in the reference frame before the homography:
    /// `p_0 = x`, `p_i = p_{i-1} + D_i(p_{i-1})`, `source = H(p_n)`.
    Sequential,
}

/// Source coordinates for every output pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMap {
    width: usize,
    height: usize,
    sx: Vec<f64>,
    sy: Vec<f64>,
}

impl SamplingMap {
    pub fn identity(width: usize, height: usize) -> Self {
        let mut sx = Vec::with_capacity(width * height);
        let mut sy = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                sx.push(x as f64);
                sy.push(y as f64);
            }
        }
        Self { width, height, sx, sy }
    }

    pub fn new(width: usize, height: usize, sx: Vec<f64>, sy: Vec<f64>) -> Result<Self> {
        if sx.len() != width * height || sy.len() != width * height {
            return Err(Error::DimensionMismatch("sampling map planes".into()));
        }
        if sx.iter().chain(sy.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite sampling coordinate".into()));
        }
        Ok(Self { width, height, sx, sy })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(f64, f64) -> (f64, f64) + Sync) -> Self {
        let mut sx = vec![0.0; width * height];
        let mut sy = vec![0.0; width * height];
        sx.par_chunks_mut(width)
            .zip(sy.par_chunks_mut(width))
            .enumerate()
            .for_each(|(y, (rx, ry))| {
                for x in 0..width {
                    let (a, b) = f(x as f64, y as f64);
                    rx[x] = a;
                    ry[x] = b;
                }
            });
        Self { width, height, sx, sy }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.sx[i], self.sy[i])
    }

    pub fn sx(&self) -> &[f64] {
        &self.sx
    }

    pub fn sy(&self) -> &[f64] {
        &self.sy
    }

    /// The map with `field` added to every source coordinate.
    pub fn plus_field(&self, field: &DisplacementField) -> Result<SamplingMap> {
        if field.width() != self.width || field.height() != self.height {
            return Err(Error::DimensionMismatch("field does not match sampling map".into()));
        }
        let sx = self.sx.iter().zip(field.dx()).map(|(a, b)| a + b).collect();
        let sy = self.sy.iter().zip(field.dy()).map(|(a, b)| a + b).collect();
        Ok(Self {
            width: self.width,
            height: self.height,
            sx,
            sy,
        })
    }

    /// Displacement `source - x` of every pixel.
    pub fn to_displacement(&self) -> DisplacementField {
        let w = self.width;
        let dx = self.sx.iter().enumerate().map(|(i, v)| v - (i % w) as f64).collect();
        let dy = self.sy.iter().enumerate().map(|(i, v)| v - (i / w) as f64).collect();
        DisplacementField::from_planes(self.width, self.height, dx, dy)
    }

    /// Resamples the map onto a canvas `1/factor` the size. Pixel centers
    /// follow the box-filter pyramid: coarse `x` sits at `factor * x + (factor - 1) / 2`.
    pub fn downscaled(&self, width: usize, height: usize, factor: f64) -> SamplingMap {
        let disp = self.to_displacement();
        let c = 0.5 * (factor - 1.0);
        SamplingMap::from_fn(width, height, |x, y| {
            let d = disp.sample(factor * x + c, factor * y + c);
            (x + d[0] / factor, y + d[1] / factor)
        })
    }

    /// Endpoint error `|self(x) - other(x)|` per pixel.
    pub fn endpoint_errors(&self, other: &SamplingMap) -> Vec<f64> {
        self.sx
            .iter()
            .zip(self.sy.iter())
            .zip(other.sx.iter().zip(other.sy.iter()))
            .map(|((a, b), (c, d))| ((a - c).powi(2) + (b - d).powi(2)).sqrt())
            .collect()
    }
}

/// Sampling map from the homography and residual fields.
pub fn compose_sampling_map(
    h: &Homography,
    fields: &[&DisplacementField],
    width: usize,
    height: usize,
) -> Result<SamplingMap> {
    compose_sampling_map_with(h, fields, width, height, Composition::Additive)
}

pub fn compose_sampling_map_with(
    h: &Homography,
    fields: &[&DisplacementField],
    width: usize,
    height: usize,
    mode: Composition,
) -> Result<SamplingMap> {
    if fields.iter().any(|f| f.width() != width || f.height() != height) {
        return Err(Error::DimensionMismatch("fields must share the canvas".into()));
    }
    let mut sx = vec![0.0; width * height];
    let mut sy = vec![0.0; width * height];
    sx.par_chunks_mut(width)
        .zip(sy.par_chunks_mut(width))
        .enumerate()
        .try_for_each(|(y, (rx, ry))| -> Result<()> {
            for x in 0..width {
                let (u, v) = match mode {
                    Composition::Additive => {
                        let (mut u, mut v) = h.apply(x as f64, y as f64)?;
                        for f in fields {
                            let d = f.at(x, y);
                            u += d[0];
                            v += d[1];
                        }
                        (u, v)
                    }
                    Composition::Sequential => {
                        let (mut px, mut py) = (x as f64, y as f64);
                        for f in fields {
                            let d = f.sample(px, py);
                            px += d[0];
                            py += d[1];
                        }
                        h.apply(px, py)?
                    }
                };
                rx[x] = u;
                ry[x] = v;
            }
            Ok(())
        })?;
    Ok(SamplingMap { width, height, sx, sy })
}

/// Backward warp of `src` through `map`; the mask is 1 where the source
/// coordinate lies on the canvas and 0 elsewhere.
pub fn warp_image(src: &ImageBuffer, map: &SamplingMap) -> (ImageBuffer, Mask) {
    let (w, h, c) = (map.width, map.height, src.channels());
    let mut data = vec![0.0; w * h * c];
    let mut mask = vec![0.0; w * h];
    data.par_chunks_mut(w * c)
        .zip(mask.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, mrow))| {
            for x in 0..w {
                let i = y * w + x;
                let valid = sample_bilinear_into(src, map.sx[i], map.sy[i], &mut row[x * c..(x + 1) * c]);
                mrow[x] = if valid { 1.0 } else { 0.0 };
            }
        });
    (
        ImageBuffer::from_raw_unchecked(w, h, c, data),
        Mask::from_raw_unchecked(w, h, mask),
    )
}

/// Warps an all-ones canvas through `map`.
pub fn warp_mask(width: usize, height: usize, map: &SamplingMap) -> Mask {
    let (wf, hf) = ((width - 1) as f64, (height - 1) as f64);
    let data = map
        .sx
        .iter()
        .zip(map.sy.iter())
        .map(|(&x, &y)| {
            if x >= 0.0 && y >= 0.0 && x <= wf && y <= hf {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Mask::from_raw_unchecked(map.width, map.height, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::new(w, h, 1, (0..w * h).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn identity_composition() {
        let m = compose_sampling_map(&Homography::identity(), &[], 7, 5).unwrap();
        assert_eq!(m, SamplingMap::identity(7, 5));
    }

    #[test]
    fn constant_field_shifts_samples() {
        let f = DisplacementField::constant(6, 4, [2.0, 0.0]);
        let m = compose_sampling_map(&Homography::identity(), &[&f], 6, 4).unwrap();
        assert_eq!(m.at(3, 2), (5.0, 2.0));
        let m = compose_sampling_map(&Homography::translation(5.0, 0.0), &[&f], 6, 4).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                assert_eq!(m.at(x, y), (x as f64 + 7.0, y as f64));
            }
        }
    }

    #[test]
    fn additive_composition_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mk = |rng: &mut ChaCha8Rng| {
            DisplacementField::new(
                8,
                8,
                (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let h = Homography::translation(0.5, -0.25);
        let ab = compose_sampling_map(&h, &[&a, &b], 8, 8).unwrap();
        let ba = compose_sampling_map(&h, &[&b, &a], 8, 8).unwrap();
        assert!(ab.endpoint_errors(&ba).iter().all(|e| *e < 1e-12));
    }

    #[test]
    fn sequential_mode_with_constant_fields() {
        let f = DisplacementField::constant(6, 4, [1.0, 0.5]);
        let m = compose_sampling_map_with(
            &Homography::translation(2.0, 0.0),
            &[&f, &f],
            6,
            4,
            Composition::Sequential,
        )
        .unwrap();
        assert_eq!(m.at(1, 1), (5.0, 2.0));
    }

    #[test]
    fn composition_propagates_infinity() {
        let h = Homography::from_row_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -0.5, 0.0, 1.0]).unwrap();
        assert!(matches!(compose_sampling_map(&h, &[], 4, 4), Err(Error::AtInfinity)));
    }

    #[test]
    fn identity_warp_reproduces_source() {
        let img = random_image(9, 7, 1);
        let (out, mask) = warp_image(&img, &SamplingMap::identity(9, 7));
        assert_eq!(out, img);
        assert!(mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn full_shift_is_empty() {
        let img = random_image(9, 7, 2);
        let map = SamplingMap::from_fn(9, 7, |x, y| (x + 9.0, y));
        let (out, mask) = warp_image(&img, &map);
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(mask.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn integer_shift_is_bit_exact() {
        let img = random_image(12, 6, 3);
        let map = SamplingMap::from_fn(12, 6, |x, y| (x + 3.0, y));
        let (out, mask) = warp_image(&img, &map);
        for y in 0..6 {
            for x in 0..12 {
                if x + 3 < 12 {
                    assert_eq!(out.get(x, y, 0), img.get(x + 3, y, 0));
                    assert_eq!(mask.get(x, y), 1.0);
                } else {
                    assert_eq!(mask.get(x, y), 0.0);
                }
            }
        }
        assert_eq!(warp_mask(12, 6, &map), mask);
    }
}
