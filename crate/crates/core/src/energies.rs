//! Content-alignment and shape-preservation energies.
//!
//! Reported losses use the plain L1 mean. Gradients are taken of a
//! Charbonnier surrogate `sqrt(d^2 + eps^2)` of the same photometric term.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{sample_gray_with_grad, ImageBuffer, Mask};
use crate::warp::{
    four_point_jacobian, warp_image, ControlGrid, DeformationModel, FourPointMotion, Homography, SamplingMap,
};

/// Charbonnier smoothing used by the gradient surrogate.
pub const CHARBONNIER_EPS: f64 = 1e-3;

const MIN_EDGE: f64 = 1e-9;

/// Weights of the content and shape terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda0: f64,
    /// One weight per refinement stage.
    pub lambda_i: Vec<f64>,
    pub omega: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda0: 1.0,
            lambda_i: vec![1.3, 1.7],
            omega: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda0 < 0.0 || self.omega < 0.0 || self.lambda_i.iter().any(|&l| l < 0.0) {
            return Err(Error::InvalidArgument("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

fn mean_abs_masked_diff(reference: &ImageBuffer, target: &ImageBuffer, map: &SamplingMap) -> f64 {
    let (warped, mask) = warp_image(target, map);
    let n = reference.data().len() as f64;
    let s: f64 = reference
        .data()
        .par_chunks(reference.width())
        .zip(warped.data().par_chunks(reference.width()))
        .zip(mask.data().par_chunks(reference.width()))
        .map(|((r, w), m)| r.iter().zip(w).zip(m).map(|((a, b), j)| (a * j - b).abs()).sum::<f64>())
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    s / n
}

fn homography_map(h: &Homography, width: usize, height: usize) -> Result<SamplingMap> {
    crate::warp::compose_sampling_map(h, &[], width, height)
}

/// Bidirectional homography terms plus one reference-side term per refinement
/// stage, each the per-pixel mean absolute difference between the masked
/// reference and the warped target. Evaluated on luminance.
pub fn content_loss(
    ir: &ImageBuffer,
    it: &ImageBuffer,
    h: &Homography,
    stage_maps: &[SamplingMap],
    weights: &LossWeights,
) -> Result<f64> {
    if !ir.same_dims(it) {
        return Err(Error::DimensionMismatch("reference and target sizes differ".into()));
    }
    if stage_maps.len() > weights.lambda_i.len() {
        return Err(Error::InvalidArgument(format!(
            "{} stage maps but {} stage weights",
            stage_maps.len(),
            weights.lambda_i.len()
        )));
    }
    let (w, hgt) = (ir.width(), ir.height());
    let (ir, it) = (ir.luminance(), it.luminance());
    let forward = homography_map(h, w, hgt)?;
    let backward = homography_map(&h.inverse()?, w, hgt)?;
    let mut loss = weights.lambda0 * mean_abs_masked_diff(&ir, &it, &forward);
    loss += weights.lambda0 * mean_abs_masked_diff(&it, &ir, &backward);
    for (map, lambda) in stage_maps.iter().zip(&weights.lambda_i) {
        if map.width() != w || map.height() != hgt {
            return Err(Error::DimensionMismatch("stage map does not match images".into()));
        }
        loss += lambda * mean_abs_masked_diff(&ir, &it, map);
    }
    Ok(loss)
}

/// Edge sets of a control lattice together with the non-overlap flags of
/// consecutive edge pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEdges {
    /// Consecutive lattice triples `(a, b, c)` (indices into the control
    /// points) whose edges `b - a` and `c - b` form a pair, with flag `Q`.
    pairs: Vec<([usize; 3], bool)>,
}

impl GridEdges {
    /// Pairs along rows then along columns; `Q` is set when all three lattice
    /// anchors fall on overlap values below 0.5.
    pub fn new(grid: &ControlGrid, overlap: &Mask) -> Result<Self> {
        let (w, h) = grid.canvas();
        if overlap.width() != w || overlap.height() != h {
            return Err(Error::DimensionMismatch(
                "overlap mask does not match the grid canvas".into(),
            ));
        }
        let (rows, cols) = grid.cells();
        let outside = |m: usize, n: usize| {
            let (x, y) = grid.anchor(m, n);
            let px = (x.round().max(0.0) as usize).min(w - 1);
            let py = (y.round().max(0.0) as usize).min(h - 1);
            overlap.get(px, py) < 0.5
        };
        let mut pairs = Vec::new();
        for m in 0..=rows {
            for n in 0..cols.saturating_sub(1) {
                let q = outside(m, n) && outside(m, n + 1) && outside(m, n + 2);
                pairs.push(([grid.index(m, n), grid.index(m, n + 1), grid.index(m, n + 2)], q));
            }
        }
        for m in 0..rows.saturating_sub(1) {
            for n in 0..=cols {
                let q = outside(m, n) && outside(m + 1, n) && outside(m + 2, n);
                pairs.push(([grid.index(m, n), grid.index(m + 1, n), grid.index(m + 2, n)], q));
            }
        }
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("grid has no consecutive edge pairs".into()));
        }
        Ok(Self { pairs })
    }

    /// Every pair flagged as non-overlapping.
    pub fn all_outside(grid: &ControlGrid) -> Result<Self> {
        let (w, h) = grid.canvas();
        Self::new(grid, &Mask::zeros(w, h))
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn active_pairs(&self) -> usize {
        self.pairs.iter().filter(|p| p.1).count()
    }

    pub fn horizontal_edge_count(grid: &ControlGrid) -> usize {
        let (rows, cols) = grid.cells();
        (rows + 1) * cols
    }

    pub fn vertical_edge_count(grid: &ControlGrid) -> usize {
        let (rows, cols) = grid.cells();
        rows * (cols + 1)
    }
}

/// Penalizes deformed edges longer than twice the nominal spacing, with the
/// horizontal and vertical sums normalized independently.
pub fn intra_grid_loss(grid: &ControlGrid) -> f64 {
    intra_value_and_grad(grid, None)
}

fn intra_value_and_grad(grid: &ControlGrid, mut grad: Option<&mut [f64]>) -> f64 {
    let (rows, cols) = grid.cells();
    let (w, h) = grid.canvas();
    let (tx, ty) = (2.0 * w as f64 / cols as f64, 2.0 * h as f64 / rows as f64);
    let nh = ((rows + 1) * cols) as f64;
    let nv = (rows * (cols + 1)) as f64;
    let mut sh = 0.0;
    let mut sv = 0.0;
    for m in 0..=rows {
        for n in 0..cols {
            let ex = grid.deformed(m, n + 1).0 - grid.deformed(m, n).0;
            if ex > tx {
                sh += ex - tx;
                if let Some(g) = grad.as_deref_mut() {
                    g[2 * grid.index(m, n + 1)] += 1.0 / nh;
                    g[2 * grid.index(m, n)] -= 1.0 / nh;
                }
            }
        }
    }
    for m in 0..rows {
        for n in 0..=cols {
            let ey = grid.deformed(m + 1, n).1 - grid.deformed(m, n).1;
            if ey > ty {
                sv += ey - ty;
                if let Some(g) = grad.as_deref_mut() {
                    g[2 * grid.index(m + 1, n) + 1] += 1.0 / nv;
                    g[2 * grid.index(m, n) + 1] -= 1.0 / nv;
                }
            }
        }
    }
    sh / nh + sv / nv
}

/// Mean over consecutive edge pairs of `Q * (1 - cos)` between the two edges.
pub fn inter_grid_loss(grid: &ControlGrid, overlap: &Mask) -> Result<f64> {
    let edges = GridEdges::new(grid, overlap)?;
    inter_value_and_grad(grid, &edges, None)
}

fn inter_value_and_grad(grid: &ControlGrid, edges: &GridEdges, mut grad: Option<&mut [f64]>) -> Result<f64> {
    let (_, cols) = grid.cells();
    let pts: Vec<(f64, f64)> = (0..grid.point_count())
        .map(|i| grid.deformed(i / (cols + 1), i % (cols + 1)))
        .collect();
    let e = edges.pairs.len() as f64;
    let mut s = 0.0;
    for &([a, b, c], q) in &edges.pairs {
        if !q {
            continue;
        }
        let u = (pts[b].0 - pts[a].0, pts[b].1 - pts[a].1);
        let v = (pts[c].0 - pts[b].0, pts[c].1 - pts[b].1);
        let nu = (u.0 * u.0 + u.1 * u.1).sqrt();
        let nv = (v.0 * v.0 + v.1 * v.1).sqrt();
        if nu < MIN_EDGE || nv < MIN_EDGE {
            let bad = if nu < MIN_EDGE { a } else { b };
            return Err(Error::ZeroLengthEdge {
                row: bad / (cols + 1),
                col: bad % (cols + 1),
            });
        }
        let dot = u.0 * v.0 + u.1 * v.1;
        let cos = dot / (nu * nv);
        s += 1.0 - cos;
        if let Some(g) = grad.as_deref_mut() {
            // d(-cos)/du and d(-cos)/dv
            let du = (
                -(v.0 / (nu * nv) - cos * u.0 / (nu * nu)) / e,
                -(v.1 / (nu * nv) - cos * u.1 / (nu * nu)) / e,
            );
            let dv = (
                -(u.0 / (nu * nv) - cos * v.0 / (nv * nv)) / e,
                -(u.1 / (nu * nv) - cos * v.1 / (nv * nv)) / e,
            );
            g[2 * a] -= du.0;
            g[2 * a + 1] -= du.1;
            g[2 * b] += du.0 - dv.0;
            g[2 * b + 1] += du.1 - dv.1;
            g[2 * c] += dv.0;
            g[2 * c + 1] += dv.1;
        }
    }
    Ok(s / e)
}

/// Intra plus inter grid loss and its gradient with respect to the flat
/// displacements of `grid`.
pub fn shape_value_and_grad(grid: &ControlGrid, edges: &GridEdges) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; 2 * grid.point_count()];
    let intra = intra_value_and_grad(grid, Some(&mut g));
    let inter = inter_value_and_grad(grid, edges, Some(&mut g))?;
    Ok((intra + inter, g))
}

pub fn total_loss(content: f64, shape: f64, omega: f64) -> f64 {
    content + omega * shape
}

/// Parameters differentiated by [`photometric_grad`].
#[derive(Debug, Clone, PartialEq)]
pub enum MotionParams {
    Homography(FourPointMotion),
    Grid(ControlGrid),
}

impl MotionParams {
    pub fn flat(&self) -> Vec<f64> {
        match self {
            MotionParams::Homography(m) => m.to_flat().to_vec(),
            MotionParams::Grid(g) => g.flat_displacements(),
        }
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<MotionParams> {
        Ok(match self {
            MotionParams::Homography(_) => {
                let arr: [f64; 8] = flat
                    .try_into()
                    .map_err(|_| Error::DimensionMismatch("four-point motion needs 8 values".into()))?;
                MotionParams::Homography(FourPointMotion::from_flat(&arr))
            }
            MotionParams::Grid(g) => {
                let mut g = g.clone();
                g.set_flat_displacements(flat)?;
                MotionParams::Grid(g)
            }
        })
    }
}

#[inline]
fn charbonnier(d: f64) -> (f64, f64) {
    let r = (d * d + CHARBONNIER_EPS * CHARBONNIER_EPS).sqrt();
    (r, d / r)
}

/// Photometric stage term `mean_x rho(Ir(x) * J(S(x)) - It(S(x)))` over a
/// set of reference pixels, where `S` is either a homography applied to the
/// prior map or the prior map plus an exponential-decay field.
///
/// Images are converted to luminance. The exponential kernel weights of the
/// selected pixels are cached, so repeated evaluation costs one
/// `pixels x control points` product.
pub struct PhotometricObjective {
    reference: ImageBuffer,
    target: ImageBuffer,
    pixels: Vec<(usize, usize)>,
    prior: Vec<(f64, f64)>,
    kind: ObjectiveKind,
}

enum ObjectiveKind {
    Homography { width: usize, height: usize },
    Grid { weights: Vec<f64>, controls: usize },
}

/// One evaluation of the objective: value and gradient.
#[derive(Debug, Clone)]
pub struct Evaluated {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl PhotometricObjective {
    /// Exponential-kernel objective; `stride` selects every `stride`-th pixel in both axes.
    pub fn new(
        ir: &ImageBuffer,
        it: &ImageBuffer,
        params: &MotionParams,
        prior: &SamplingMap,
        theta: f64,
        stride: usize,
    ) -> Result<Self> {
        Self::with_model(ir, it, params, prior, DeformationModel::Edffd, theta, stride)
    }

    pub fn with_model(
        ir: &ImageBuffer,
        it: &ImageBuffer,
        params: &MotionParams,
        prior: &SamplingMap,
        model: DeformationModel,
        theta: f64,
        stride: usize,
    ) -> Result<Self> {
        if !ir.same_dims(it) {
            return Err(Error::DimensionMismatch("reference and target sizes differ".into()));
        }
        if prior.width() != ir.width() || prior.height() != ir.height() {
            return Err(Error::DimensionMismatch("prior map does not match images".into()));
        }
        let stride = stride.max(1);
        let pixels: Vec<(usize, usize)> = (0..ir.height())
            .step_by(stride)
            .flat_map(|y| (0..ir.width()).step_by(stride).map(move |x| (x, y)))
            .collect();
        let prior_pts: Vec<(f64, f64)> = pixels.iter().map(|&(x, y)| prior.at(x, y)).collect();
        let kind = match params {
            MotionParams::Homography(_) => ObjectiveKind::Homography {
                width: ir.width(),
                height: ir.height(),
            },
            MotionParams::Grid(g) => {
                if g.canvas() != (ir.width(), ir.height()) {
                    return Err(Error::DimensionMismatch("grid canvas does not match images".into()));
                }
                let pts: Vec<(f64, f64)> = pixels.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
                ObjectiveKind::Grid {
                    weights: model.weight_matrix(g, theta, &pts)?,
                    controls: g.point_count(),
                }
            }
        };
        Ok(Self {
            reference: ir.luminance(),
            target: it.luminance(),
            pixels,
            prior: prior_pts,
            kind,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.pixels.len()
    }

    /// Surrogate value only.
    pub fn value(&self, params: &MotionParams) -> Result<f64> {
        Ok(self.evaluate(params, false)?.value)
    }

    pub fn value_and_grad(&self, params: &MotionParams) -> Result<Evaluated> {
        self.evaluate(params, true)
    }

    fn evaluate(&self, params: &MotionParams, with_grad: bool) -> Result<Evaluated> {
        let n = self.pixels.len() as f64;
        match (&self.kind, params) {
            (ObjectiveKind::Grid { weights, controls }, MotionParams::Grid(g)) => {
                let c = *controls;
                if g.point_count() != c {
                    return Err(Error::DimensionMismatch("grid size changed".into()));
                }
                let disp = g.displacements();
                // Per-pixel residual derivative with respect to the sample position.
                let per_pixel: Vec<(f64, [f64; 2])> = self
                    .pixels
                    .par_iter()
                    .enumerate()
                    .map(|(i, &(x, y))| {
                        let row = &weights[i * c..(i + 1) * c];
                        let (mut ux, mut uy) = self.prior[i];
                        for (wk, d) in row.iter().zip(disp) {
                            ux += wk * d[0];
                            uy += wk * d[1];
                        }
                        self.residual(x, y, ux, uy)
                    })
                    .collect();
                let value = per_pixel.iter().map(|p| p.0).sum::<f64>() / n;
                let mut grad = vec![0.0; 2 * c];
                if with_grad {
                    // Fixed reduction order: chunks of pixels in parallel, then serial sum.
                    let chunk = 256;
                    let partials: Vec<Vec<f64>> = per_pixel
                        .par_chunks(chunk)
                        .enumerate()
                        .map(|(ci, block)| {
                            let mut acc = vec![0.0; 2 * c];
                            for (j, (_, g)) in block.iter().enumerate() {
                                if g[0] == 0.0 && g[1] == 0.0 {
                                    continue;
                                }
                                let i = ci * chunk + j;
                                let row = &weights[i * c..(i + 1) * c];
                                for (k, wk) in row.iter().enumerate() {
                                    acc[2 * k] += wk * g[0];
                                    acc[2 * k + 1] += wk * g[1];
                                }
                            }
                            acc
                        })
                        .collect();
                    for p in partials {
                        for (a, b) in grad.iter_mut().zip(p) {
                            *a += b;
                        }
                    }
                    grad.iter_mut().for_each(|v| *v /= n);
                }
                Ok(Evaluated { value, grad })
            }
            (ObjectiveKind::Homography { width, height }, MotionParams::Homography(m)) => {
                let (h, jac) = four_point_jacobian(m, *width, *height)?;
                let hm = h.matrix();
                let per_pixel: Vec<Result<(f64, [f64; 9])>> = self
                    .pixels
                    .par_iter()
                    .enumerate()
                    .map(|(i, &(x, y))| {
                        let (px, py) = self.prior[i];
                        let w = hm[(2, 0)] * px + hm[(2, 1)] * py + hm[(2, 2)];
                        if w.abs() < 1e-12 {
                            return Err(Error::AtInfinity);
                        }
                        let u = (hm[(0, 0)] * px + hm[(0, 1)] * py + hm[(0, 2)]) / w;
                        let v = (hm[(1, 0)] * px + hm[(1, 1)] * py + hm[(1, 2)]) / w;
                        let (val, g) = self.residual(x, y, u, v);
                        let mut dh = [0.0; 9];
                        if g[0] != 0.0 || g[1] != 0.0 {
                            let iw = 1.0 / w;
                            dh[0] = g[0] * px * iw;
                            dh[1] = g[0] * py * iw;
                            dh[2] = g[0] * iw;
                            dh[3] = g[1] * px * iw;
                            dh[4] = g[1] * py * iw;
                            dh[5] = g[1] * iw;
                            let t = -(g[0] * u + g[1] * v) * iw;
                            dh[6] = t * px;
                            dh[7] = t * py;
                            dh[8] = t;
                        }
                        Ok((val, dh))
                    })
                    .collect();
                let mut value = 0.0;
                let mut dh_sum = [0.0; 9];
                for r in per_pixel {
                    let (v, dh) = r?;
                    value += v;
                    for e in 0..9 {
                        dh_sum[e] += dh[e];
                    }
                }
                let grad = (0..8)
                    .map(|k| (0..9).map(|e| dh_sum[e] * jac[k][e]).sum::<f64>() / n)
                    .collect();
                Ok(Evaluated { value: value / n, grad })
            }
            _ => Err(Error::InvalidArgument("parameters do not match the objective".into())),
        }
    }

    /// Surrogate residual at reference pixel `(x, y)` sampled at `(u, v)` and
    /// its derivative with respect to `(u, v)`.
    #[inline]
    fn residual(&self, x: usize, y: usize, u: f64, v: f64) -> (f64, [f64; 2]) {
        match sample_gray_with_grad(&self.target, u, v) {
            Some((t, gx, gy)) => {
                let d = self.reference.get(x, y, 0) - t;
                let (rho, drho) = charbonnier(d);
                (rho, [-drho * gx, -drho * gy])
            }
            None => (CHARBONNIER_EPS, [0.0; 2]),
        }
    }
}

/// Gradient of the photometric stage term with respect to the four-point
/// motion or the control displacements, over all pixels.
pub fn photometric_grad(
    ir: &ImageBuffer,
    it: &ImageBuffer,
    params: &MotionParams,
    prior: &SamplingMap,
    theta: f64,
) -> Result<Vec<f64>> {
    let obj = PhotometricObjective::new(ir, it, params, prior, theta, 1)?;
    Ok(obj.value_and_grad(params)?.grad)
}
