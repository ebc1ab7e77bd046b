//! Seeded synthetic registration fixtures with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregator::Sample;
use crate::correlation::{extract_features, local_correlation};
use crate::error::Result;
use crate::image::ImageBuffer;
use crate::warp::{
    compose_sampling_map, edffd_field, four_point_to_homography, ControlGrid, FourPointMotion, Homography, SamplingMap,
};

/// Continuous procedural texture: a sum of Gaussian blobs squashed into (0, 1).
#[derive(Debug, Clone)]
pub struct Texture {
    blobs: Vec<[f64; 4]>,
}

impl Texture {
    /// Blobs cover `[-margin, width + margin] x [-margin, height + margin]`
    /// with radii in `sigma`.
    pub fn random(width: usize, height: usize, margin: f64, sigma: (f64, f64), rng: &mut impl Rng) -> Self {
        let (x0, x1) = (-margin, width as f64 + margin);
        let (y0, y1) = (-margin, height as f64 + margin);
        let mean_sigma = 0.5 * (sigma.0 + sigma.1);
        let count = (((x1 - x0) * (y1 - y0)) / (2.5 * mean_sigma * mean_sigma)).ceil() as usize;
        let blobs = (0..count)
            .map(|_| {
                let amp = rng.gen_range(0.4..1.2) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                [
                    rng.gen_range(x0..x1),
                    rng.gen_range(y0..y1),
                    rng.gen_range(sigma.0..sigma.1),
                    amp,
                ]
            })
            .collect();
        Self { blobs }
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        let mut s = 0.0;
        for &[cx, cy, sg, a] in &self.blobs {
            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
            let t = d2 / (2.0 * sg * sg);
            if t < 18.0 {
                s += a * (-t).exp();
            }
        }
        0.5 + 0.45 * s.tanh()
    }

    /// Samples the texture at the source coordinates of `map`.
    pub fn render(&self, map: &SamplingMap) -> ImageBuffer {
        let (w, h) = (map.width(), map.height());
        let data: Vec<f64> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (x, y) = map.at(i % w, i / w);
                self.value(x, y)
            })
            .collect();
        ImageBuffer::new(w, h, 1, data).expect("texture values lie in (0, 1)")
    }
}

/// A reference/target pair with `reference(x) = target(truth(x))` up to the
/// continuous texture, i.e. without resampling error.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub reference: ImageBuffer,
    pub target: ImageBuffer,
    pub homography: Homography,
    pub grid: ControlGrid,
    pub truth: SamplingMap,
}

/// Ground-truth motion settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSpec {
    pub width: usize,
    pub height: usize,
    /// Largest corner displacement of the homography, pixels.
    pub corner_max: f64,
    /// Largest control displacement of the exponential-kernel field, pixels.
    pub displacement_max: f64,
    pub grid: (usize, usize),
    pub theta: f64,
}

impl Default for PairSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            corner_max: 20.0,
            displacement_max: 5.0,
            grid: (12, 12),
            theta: 0.75,
        }
    }
}

pub fn generate_pair(spec: &PairSpec, seed: u64) -> Result<SyntheticPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);
    let mut corners = [[0.0; 2]; 4];
    if spec.corner_max > 0.0 {
        for c in corners.iter_mut() {
            *c = [
                rng.gen_range(-spec.corner_max..=spec.corner_max),
                rng.gen_range(-spec.corner_max..=spec.corner_max),
            ];
        }
    }
    let homography = four_point_to_homography(&FourPointMotion { corners }, w, h)?;
    let mut grid = ControlGrid::new(spec.grid.0, spec.grid.1, w, h)?;
    if spec.displacement_max > 0.0 {
        let a = spec.displacement_max;
        for d in grid.displacements_mut() {
            *d = [rng.gen_range(-a..=a), rng.gen_range(-a..=a)];
        }
    }
    let field = edffd_field(&grid, spec.theta)?;
    let truth = compose_sampling_map(&homography, &[&field], w, h)?;
    let texture = Texture::random(w, h, 64.0, (4.0, 14.0), &mut rng);
    let target = texture.render(&SamplingMap::identity(w, h));
    let reference = texture.render(&truth);
    Ok(SyntheticPair {
        reference,
        target,
        homography,
        grid,
        truth,
    })
}

/// Mean endpoint error between two maps over pixels at least `border` away
/// from the canvas edge whose true source also lies that far inside.
pub fn interior_endpoint_error(estimate: &SamplingMap, truth: &SamplingMap, border: usize) -> f64 {
    let (w, h) = (truth.width(), truth.height());
    let b = border as f64;
    let (xmax, ymax) = ((w - 1) as f64 - b, (h - 1) as f64 - b);
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in border..h.saturating_sub(border) {
        for x in border..w.saturating_sub(border) {
            let (tx, ty) = truth.at(x, y);
            if tx < b || ty < b || tx > xmax || ty > ymax {
                continue;
            }
            let (ex, ey) = estimate.at(x, y);
            sum += ((ex - tx).powi(2) + (ey - ty).powi(2)).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// RGB test image with roughly 1/f spectrum: octaves of smooth value noise
/// plus a few hard-edged occluders.
pub fn natural_image(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let octaves: Vec<(f64, Vec<f64>, usize)> = (0..6)
        .map(|o| {
            let cell = 64.0 / (1 << o) as f64;
            let gw = (width as f64 / cell).ceil() as usize + 2;
            let gh = (height as f64 / cell).ceil() as usize + 2;
            (cell, (0..gw * gh * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(), gw)
        })
        .collect();
    let shapes: Vec<[f64; 6]> = (0..6)
        .map(|_| {
            [
                rng.gen_range(0.0..width as f64),
                rng.gen_range(0.0..height as f64),
                rng.gen_range(6.0..40.0),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
            ]
        })
        .collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let mut px = [0.5; 3];
            for (o, (cell, lattice, gw)) in octaves.iter().enumerate() {
                let (u, v) = (x as f64 / cell, y as f64 / cell);
                let (i, j) = (u.floor() as usize, v.floor() as usize);
                let (fu, fv) = (smooth(u.fract()), smooth(v.fract()));
                let amp = 0.25 / (1 << o) as f64;
                for (c, p) in px.iter_mut().enumerate() {
                    let at = |a: usize, b: usize| lattice[((b * gw) + a) * 3 + c];
                    let top = at(i, j) * (1.0 - fu) + at(i + 1, j) * fu;
                    let bottom = at(i, j + 1) * (1.0 - fu) + at(i + 1, j + 1) * fu;
                    *p += amp * (top * (1.0 - fv) + bottom * fv);
                }
            }
            for s in &shapes {
                if (x as f64 - s[0]).powi(2) + (y as f64 - s[1]).powi(2) < s[2] * s[2] {
                    px = [
                        0.5 * px[0] + 0.5 * s[3],
                        0.5 * px[1] + 0.5 * s[4],
                        0.5 * px[2] + 0.5 * s[5],
                    ];
                }
            }
            data.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
        }
    }
    ImageBuffer::new(width, height, 3, data).expect("values are clamped to [0, 1]")
}

/// Width of a toy-regression feature vector.
pub const TOY_FEATURES: usize = 400;
/// Largest corner motion of the toy set, pixels; targets are divided by it.
pub const TOY_MOTION: f64 = 6.0;

/// Local correlation volumes (4x4 cells, radius 2) of small warped texture
/// pairs against their normalized four-point corner motion.
pub fn toy_dataset(count: usize, seed: u64) -> Result<Vec<Sample>> {
    const SIZE: usize = 32;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64));
            let mut corners = [[0.0; 2]; 4];
            for c in corners.iter_mut() {
                *c = [
                    rng.gen_range(-TOY_MOTION..TOY_MOTION),
                    rng.gen_range(-TOY_MOTION..TOY_MOTION),
                ];
            }
            let motion = FourPointMotion { corners };
            let h = four_point_to_homography(&motion, SIZE, SIZE)?;
            let texture = Texture::random(SIZE, SIZE, 12.0, (3.0, 8.0), &mut rng);
            let target = texture.render(&SamplingMap::identity(SIZE, SIZE));
            let reference = texture.render(&compose_sampling_map(&h, &[], SIZE, SIZE)?);
            let vol = local_correlation(&extract_features(&reference, 8)?, &extract_features(&target, 8)?, 2)?;
            debug_assert_eq!(vol.scores().len(), TOY_FEATURES);
            Ok(Sample {
                features: vol.scores().to_vec(),
                target: motion.to_flat().iter().map(|v| v / TOY_MOTION).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::warp_image;

    #[test]
    fn pair_is_consistent_with_truth() {
        let spec = PairSpec {
            width: 96,
            height: 96,
            corner_max: 6.0,
            displacement_max: 2.0,
            grid: (4, 4),
            theta: 0.75,
        };
        let pair = generate_pair(&spec, 3).unwrap();
        let (warped, mask) = warp_image(&pair.target, &pair.truth);
        let mse = crate::image::masked_mse(&pair.reference, &warped, &mask).unwrap();
        // only bilinear interpolation error of a smooth texture remains
        assert!(mse < 1e-4, "mse {mse}");
        let again = generate_pair(&spec, 3).unwrap();
        assert_eq!(again.reference, pair.reference);
    }

    #[test]
    fn endpoint_error_of_truth_is_zero() {
        let pair = generate_pair(
            &PairSpec {
                width: 64,
                height: 64,
                grid: (4, 4),
                ..PairSpec::default()
            },
            1,
        )
        .unwrap();
        assert_eq!(interior_endpoint_error(&pair.truth, &pair.truth, 8), 0.0);
        let shifted = SamplingMap::from_fn(64, 64, |x, y| {
            let (a, b) = pair.truth.at(x as usize, y as usize);
            (a + 0.5, b)
        });
        assert!((interior_endpoint_error(&shifted, &pair.truth, 8) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn toy_samples_have_expected_widths() {
        let set = toy_dataset(3, 5).unwrap();
        assert!(set
            .iter()
            .all(|s| s.features.len() == TOY_FEATURES && s.target.len() == 8));
        assert!(set.iter().all(|s| s.target.iter().all(|v| v.abs() <= 1.0)));
    }
}
