//! Progressive registration: a global homography from coarse global
//! correlation, then refinement grids fitted to local correlation flow and
//! polished by photometric descent.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::correlation::{
    extract_features, global_correlation, local_correlation, local_volume_to_flow, volume_to_flow,
};
use crate::energies::{shape_value_and_grad, GridEdges, LossWeights, MotionParams, PhotometricObjective};
use crate::error::{Error, Result};
use crate::image::{build_pyramid, ImageBuffer, Mask};
use crate::params::WarpParams;
use crate::warp::{
    compose_sampling_map_with, fit_homography, four_point_to_homography, warp_image, warp_mask, Composition,
    ControlGrid, DeformationModel, DisplacementField, FourPointMotion, Homography, SamplingMap,
};

/// Cell pitch, in full-resolution pixels, of the global correlation.
const GLOBAL_CELL: usize = 8;
/// Upper bound on global correlation cells; coarser cells are used beyond it.
const MAX_GLOBAL_CELLS: usize = 2048;
/// Inlier residual, in pixels, for the consensus set.
const REFIT_RESIDUAL: f64 = 3.0;
const MIN_CORRESPONDENCES: usize = 8;
const RANSAC_TRIALS: usize = 500;
const RANSAC_SEED: u64 = 0x5eed;
/// Cap on `pixels x control points` for cached descent weights.
const MAX_WEIGHT_ENTRIES: usize = 4_000_000;
const LBFGS_MEMORY: usize = 6;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    pub n_stages: usize,
    pub stage_grids: Vec<(usize, usize)>,
    pub model: DeformationModel,
    pub theta: f64,
    /// Patch size of the global correlation.
    pub k: usize,
    pub alpha: f64,
    pub radius: usize,
    pub weights: LossWeights,
    pub pyramid_levels: usize,
    pub max_iterations: usize,
    /// Largest parameter change of the first descent step, pixels.
    pub step: f64,
    pub ridge: f64,
    /// Cell pitch of the refinement features, pixels.
    pub refine_downsample: usize,
    pub composition: Composition,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            n_stages: 1,
            stage_grids: vec![(12, 12), (18, 18)],
            model: DeformationModel::Edffd,
            theta: 0.75,
            k: 3,
            alpha: 10.0,
            radius: 4,
            weights: LossWeights::default(),
            pyramid_levels: 3,
            max_iterations: 100,
            step: 0.5,
            ridge: 1e-3,
            refine_downsample: 4,
            composition: Composition::Additive,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(1..=2).contains(&self.n_stages) {
            return bad("number of stages must be 1 or 2");
        }
        if self.stage_grids.len() < self.n_stages || self.stage_grids.iter().any(|&(m, n)| m == 0 || n == 0) {
            return bad("every stage needs a positive grid size");
        }
        if self.weights.lambda_i.len() < self.n_stages {
            return bad("every stage needs a loss weight");
        }
        self.weights.validate()?;
        let positive = [self.theta, self.alpha, self.step, self.ridge];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("theta, alpha, step and ridge must be positive");
        }
        if self.k == 0 || self.k.is_multiple_of(2) || self.radius == 0 || self.pyramid_levels == 0 || self.refine_downsample == 0
        {
            return bad("K must be odd, radius, pyramid levels and downsample positive");
        }
        Ok(())
    }

    /// Pyramid level of refinement stage `i` (0-based): the last stage runs
    /// at full resolution, earlier ones one level coarser each.
    pub fn stage_level(&self, i: usize) -> usize {
        (self.n_stages - 1 - i).min(self.pyramid_levels - 1)
    }
}

/// Objective values of one descent phase, one entry per accepted iterate
/// (the first is the starting point), with the step length taken.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    /// 0 for the homography, `i` for refinement stage `i`.
    pub stage: usize,
    pub level: usize,
    pub values: Vec<f64>,
    pub steps: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Timings {
    pub inference_ms: f64,
    pub warp_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub homography: Homography,
    pub grids: Vec<ControlGrid>,
    pub params: WarpParams,
    pub map: SamplingMap,
    pub warped: ImageBuffer,
    pub overlap: Mask,
    pub traces: Vec<LossTrace>,
    pub timings: Timings,
}

/// Monotone limited-memory quasi-Newton descent with step halving.
///
/// The first direction is the negative gradient scaled so that no parameter
/// moves more than `step`. A trial point is accepted only if it lowers the
/// objective; otherwise the step is halved.
fn descend(
    f: &dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
    x0: Vec<f64>,
    iterations: usize,
    step: f64,
    trace: &mut LossTrace,
) -> Result<Vec<f64>> {
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    trace.values.push(fx);
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let inf_norm = |a: &[f64]| a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for _ in 0..iterations {
        let gmax = inf_norm(&g);
        if gmax == 0.0 || !gmax.is_finite() {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let mut d = if let Some((s, y, _)) = hist.last() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter().map(|v| -gamma * v).collect::<Vec<f64>>()
        } else {
            g.iter().map(|v| -v * step / gmax).collect()
        };
        if !hist.is_empty() {
            for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
                let b = rho * dot(y, &d);
                // d holds -H q, so the correction enters with the opposite sign
                d.iter_mut().zip(s).for_each(|(di, si)| *di -= (a - b) * si);
            }
        }
        if dot(&d, &g) >= 0.0 {
            d = g.iter().map(|v| -v * step / gmax).collect();
            hist.clear();
        }
        // keep single moves within a few pixels
        let dmax = inf_norm(&d);
        let cap = 8.0 * step;
        if dmax > cap {
            d.iter_mut().for_each(|v| *v *= cap / dmax);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let (fn_, gn) = f(&xn)?;
            if fn_ < fx {
                accepted = Some((xn, fn_, gn));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else { break };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if hist.len() == LBFGS_MEMORY {
                hist.remove(0);
            }
            hist.push((s, y, 1.0 / sy));
        }
        trace.steps.push(t * inf_norm(&d));
        x = xn;
        fx = fn_;
        g = gn;
        trace.values.push(fx);
    }
    Ok(x)
}

/// `[[s, 0, c], [0, s, c], [0, 0, 1]]` maps level coordinates to full
/// resolution, `s = 2^level`, `c = (s - 1) / 2`.
fn level_transform(level: usize) -> Matrix3<f64> {
    let s = (1usize << level) as f64;
    let c = 0.5 * (s - 1.0);
    Matrix3::new(s, 0.0, c, 0.0, s, c, 0.0, 0.0, 1.0)
}

fn homography_to_level(h: &Homography, level: usize) -> Result<Homography> {
    let a = level_transform(level);
    let ainv = a.try_inverse().ok_or(Error::Singular)?;
    Homography::from_matrix(ainv * h.matrix() * a)
}

fn homography_from_level(h: &Homography, level: usize) -> Result<Homography> {
    let a = level_transform(level);
    let ainv = a.try_inverse().ok_or(Error::Singular)?;
    Homography::from_matrix(a * h.matrix() * ainv)
}

fn stride_for(pixels: usize, controls: usize) -> usize {
    let mut stride = 1;
    while (pixels / (stride * stride)) * controls.max(1) > MAX_WEIGHT_ENTRIES {
        stride += 1;
    }
    stride
}

/// Cell-center correspondences from global correlation, in full-resolution pixels.
fn global_correspondences(
    ir: &ImageBuffer,
    it: &ImageBuffer,
    cfg: &RegistrationConfig,
) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>, Vec<f64>)> {
    let (w, h) = (ir.width(), ir.height());
    let mut cell = GLOBAL_CELL;
    while (w / cell) * (h / cell) > MAX_GLOBAL_CELLS {
        cell *= 2;
    }
    // features on the coarsest level that keeps at least one pixel per cell
    let mut level = 0;
    while level + 1 < cfg.pyramid_levels && (cell >> (level + 1)) >= 1 && (1 << (level + 1)) <= cell {
        level += 1;
    }
    let ds = cell >> level;
    let (pr, pt) = (build_pyramid(ir, level + 1)?, build_pyramid(it, level + 1)?);
    let fr = extract_features(pr.level(level), ds)?;
    let ft = extract_features(pt.level(level), ds)?;
    let vol = global_correlation(&fr, &ft, cfg.k)?;
    let flow = volume_to_flow(&vol, cfg.alpha)?;
    let cellf = cell as f64;
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut wts = Vec::new();
    for cy in 0..flow.height() {
        for cx in 0..flow.width() {
            let p = ((cx as f64 + 0.5) * cellf - 0.5, (cy as f64 + 0.5) * cellf - 0.5);
            let f = flow.at(cx, cy);
            src.push(p);
            dst.push((p.0 + f[0] * cellf, p.1 + f[1] * cellf));
            wts.push(flow.confidence(cx, cy));
        }
    }
    Ok((src, dst, wts))
}

fn residual(h: &Homography, s: (f64, f64), d: (f64, f64)) -> f64 {
    match h.apply(s.0, s.1) {
        Ok(p) => ((p.0 - d.0).powi(2) + (p.1 - d.1).powi(2)).sqrt(),
        Err(_) => f64::INFINITY,
    }
}

/// Global correlation correspondences fitted by seeded RANSAC on four-point
/// samples, then a confidence-weighted DLT on the consensus set.
pub fn correlation_homography(ir: &ImageBuffer, it: &ImageBuffer, cfg: &RegistrationConfig) -> Result<Homography> {
    let (src, dst, wts) = global_correspondences(ir, it, cfg)?;
    let active: Vec<usize> = (0..wts.len()).filter(|&i| wts[i] > 0.0).collect();
    if active.len() < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientOverlap(active.len()));
    }
    let score = |h: &Homography| -> (f64, Vec<usize>) {
        let inliers: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&i| residual(h, src[i], dst[i]) <= REFIT_RESIDUAL)
            .collect();
        (inliers.iter().map(|&i| wts[i]).sum(), inliers)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(RANSAC_SEED);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..RANSAC_TRIALS {
        let pick: Vec<usize> = active.choose_multiple(&mut rng, 4).copied().collect();
        let s: Vec<_> = pick.iter().map(|&i| src[i]).collect();
        let d: Vec<_> = pick.iter().map(|&i| dst[i]).collect();
        let Ok(h) = fit_homography(&s, &d, None) else { continue };
        let cand = score(&h);
        if best.as_ref().is_none_or(|b| cand.0 > b.0) {
            best = Some(cand);
        }
    }
    let mut inliers = best.map(|b| b.1).unwrap_or_default();
    let mut h = None;
    // re-fit on the consensus set until it stops growing
    for _ in 0..4 {
        if inliers.len() < MIN_CORRESPONDENCES {
            break;
        }
        let s: Vec<_> = inliers.iter().map(|&i| src[i]).collect();
        let d: Vec<_> = inliers.iter().map(|&i| dst[i]).collect();
        let w: Vec<_> = inliers.iter().map(|&i| wts[i]).collect();
        let fit = fit_homography(&s, &d, Some(&w))?;
        let (_, next) = score(&fit);
        let grew = next.len() > inliers.len();
        h = Some(fit);
        if !grew {
            break;
        }
        inliers = next;
    }
    h.ok_or(Error::InsufficientOverlap(inliers.len()))
}

/// Coarse-to-fine photometric descent on the four-point parameters.
fn polish_homography(
    pr: &[ImageBuffer],
    pt: &[ImageBuffer],
    h: Homography,
    cfg: &RegistrationConfig,
    traces: &mut Vec<LossTrace>,
) -> Result<Homography> {
    let mut h = h;
    for level in (0..pr.len()).rev() {
        let (ir, it) = (&pr[level], &pt[level]);
        let (w, hh) = (ir.width(), ir.height());
        let hl = homography_to_level(&h, level)?;
        let motion = FourPointMotion::from_homography(&hl, w, hh)?;
        let params = MotionParams::Homography(motion);
        let stride = stride_for(w * hh, 1);
        let obj = PhotometricObjective::new(ir, it, &params, &SamplingMap::identity(w, hh), cfg.theta, stride)?;
        let lambda = cfg.weights.lambda0;
        let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let p = params.with_flat(x)?;
            match obj.value_and_grad(&p) {
                Ok(e) => Ok((lambda * e.value, e.grad.iter().map(|v| lambda * v).collect())),
                // a trial that degenerates the corners is treated as uphill
                Err(Error::DegenerateCorners | Error::AtInfinity | Error::Singular) => {
                    Ok((f64::INFINITY, vec![0.0; 8]))
                }
                Err(e) => Err(e),
            }
        };
        let mut trace = LossTrace {
            stage: 0,
            level,
            ..LossTrace::default()
        };
        let x = descend(&f, params.flat(), cfg.max_iterations, cfg.step, &mut trace)?;
        traces.push(trace);
        let arr: [f64; 8] = x.as_slice().try_into().expect("eight corner values");
        let hl = four_point_to_homography(&FourPointMotion::from_flat(&arr), w, hh)?;
        h = homography_from_level(&hl, level)?;
    }
    Ok(h)
}

/// Global stage: correlation-seeded homography refined photometrically over the pyramid.
pub fn estimate_homography_stage(ir: &ImageBuffer, it: &ImageBuffer, cfg: &RegistrationConfig) -> Result<Homography> {
    let mut traces = Vec::new();
    homography_stage(ir, it, cfg, &mut traces)
}

fn homography_stage(
    ir: &ImageBuffer,
    it: &ImageBuffer,
    cfg: &RegistrationConfig,
    traces: &mut Vec<LossTrace>,
) -> Result<Homography> {
    if !ir.same_dims(it) {
        return Err(Error::DimensionMismatch("reference and target sizes differ".into()));
    }
    let (ir, it) = (ir.luminance(), it.luminance());
    let h0 = correlation_homography(&ir, &it, cfg)?;
    let pr = build_pyramid(&ir, cfg.pyramid_levels)?;
    let pt = build_pyramid(&it, cfg.pyramid_levels)?;
    polish_homography(pr.levels(), pt.levels(), h0, cfg, traces)
}

/// Ridge least-squares fit of control displacements to a flow sampled at
/// `points`, each axis solved separately with the same normal matrix.
pub fn fit_grid_to_flow(
    grid: &ControlGrid,
    model: DeformationModel,
    theta: f64,
    points: &[(f64, f64)],
    flow: &[[f64; 2]],
    weights: &[f64],
    ridge: f64,
) -> Result<ControlGrid> {
    let c = grid.point_count();
    let k = model.weight_matrix(grid, theta, points)?;
    let mut a = DMatrix::<f64>::zeros(c, c);
    let mut bx = DVector::<f64>::zeros(c);
    let mut by = DVector::<f64>::zeros(c);
    for (p, (&wt, f)) in weights.iter().zip(flow).enumerate() {
        if wt <= 0.0 {
            continue;
        }
        let row = &k[p * c..(p + 1) * c];
        for i in 0..c {
            if row[i] == 0.0 {
                continue;
            }
            let wi = wt * row[i];
            bx[i] += wi * f[0];
            by[i] += wi * f[1];
            for j in i..c {
                a[(i, j)] += wi * row[j];
            }
        }
    }
    for i in 0..c {
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
        a[(i, i)] += ridge;
    }
    let chol = a.cholesky().ok_or(Error::SingularSystem)?;
    let (sx, sy) = (chol.solve(&bx), chol.solve(&by));
    if sx.iter().chain(sy.iter()).any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    let mut out = grid.clone();
    for (i, d) in out.displacements_mut().iter_mut().enumerate() {
        *d = [sx[i], sy[i]];
    }
    Ok(out)
}

/// One refinement stage on images of the prior map's resolution. `lambda`
/// weighs the photometric term against `omega` times the grid losses.
fn refine(
    ir: &ImageBuffer,
    it: &ImageBuffer,
    prior: &SamplingMap,
    grid_size: (usize, usize),
    lambda: f64,
    cfg: &RegistrationConfig,
    trace: &mut LossTrace,
) -> Result<ControlGrid> {
    let (w, h) = (ir.width(), ir.height());
    let grid = ControlGrid::new(grid_size.0, grid_size.1, w, h)?;
    let (warped, valid) = warp_image(it, prior);
    let ds = cfg.refine_downsample;
    let fr = extract_features(ir, ds)?;
    let ft = extract_features(&warped, ds)?;
    let vol = local_correlation(&fr, &ft, cfg.radius)?;
    let flow = local_volume_to_flow(&vol, cfg.alpha)?;
    let side = (2 * cfg.radius + 1) as f64;
    let min_conf = 2.0 / (side * side);
    let mut points = Vec::new();
    let mut vectors = Vec::new();
    let mut weights = Vec::new();
    for cy in 0..flow.height() {
        for cx in 0..flow.width() {
            let conf = flow.confidence(cx, cy);
            // cells touching invalid warped pixels carry no usable match
            let covered = (cy * ds..(cy + 1) * ds).all(|y| (cx * ds..(cx + 1) * ds).all(|x| valid.get(x, y) > 0.0));
            if conf < min_conf || !covered {
                continue;
            }
            let f = flow.at(cx, cy);
            points.push(((cx as f64 + 0.5) * ds as f64 - 0.5, (cy as f64 + 0.5) * ds as f64 - 0.5));
            vectors.push([f[0] * ds as f64, f[1] * ds as f64]);
            weights.push(conf);
        }
    }
    let fitted = if points.is_empty() {
        grid.clone()
    } else {
        fit_grid_to_flow(&grid, cfg.model, cfg.theta, &points, &vectors, &weights, cfg.ridge)?
    };

    let overlap = warp_mask(w, h, prior);
    let edges = GridEdges::new(&grid, &overlap)?;
    let stride = stride_for(w * h, grid.point_count());
    let params = MotionParams::Grid(grid.clone());
    let obj = PhotometricObjective::with_model(ir, it, &params, prior, cfg.model, cfg.theta, stride)?;
    let omega = cfg.weights.omega;
    let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let p = params.with_flat(x)?;
        let e = obj.value_and_grad(&p)?;
        let MotionParams::Grid(g) = &p else { unreachable!() };
        let (shape, sg) = match shape_value_and_grad(g, &edges) {
            Ok(v) => v,
            Err(Error::ZeroLengthEdge { .. }) => return Ok((f64::INFINITY, vec![0.0; x.len()])),
            Err(e) => return Err(e),
        };
        let grad = e.grad.iter().zip(&sg).map(|(a, b)| lambda * a + omega * b).collect();
        Ok((lambda * e.value + omega * shape, grad))
    };
    // start from the flow fit only when it beats the undeformed grid
    let zero = grid.flat_displacements();
    let start = fitted.flat_displacements();
    let x0 = if f(&start)?.0 < f(&zero)?.0 { start } else { zero };
    let x = descend(&f, x0, cfg.max_iterations, cfg.step, trace)?;
    let mut out = grid;
    out.set_flat_displacements(&x)?;
    Ok(out)
}

/// Refinement stage at the resolution of `ir`: flow-fitted grid polished by descent.
pub fn refine_stage(
    ir: &ImageBuffer,
    it: &ImageBuffer,
    prior: &SamplingMap,
    grid_size: (usize, usize),
    cfg: &RegistrationConfig,
) -> Result<ControlGrid> {
    if !ir.same_dims(it) || prior.width() != ir.width() || prior.height() != ir.height() {
        return Err(Error::DimensionMismatch(
            "images and prior map must share a canvas".into(),
        ));
    }
    let lambda = cfg.weights.lambda_i.first().copied().unwrap_or(1.0);
    let mut trace = LossTrace::default();
    refine(
        &ir.luminance(),
        &it.luminance(),
        prior,
        grid_size,
        lambda,
        cfg,
        &mut trace,
    )
}

fn stage_error(stage: &str, e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{stage}: {m}")),
        other => Error::InvalidArgument(format!("{stage} stage failed: {other}")),
    }
}

/// Full registration of `it` onto `ir`.
pub fn register(ir: &ImageBuffer, it: &ImageBuffer, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    if !ir.same_dims(it) {
        return Err(Error::DimensionMismatch("reference and target sizes differ".into()));
    }
    if ir.width() < 64 || ir.height() < 64 {
        return Err(Error::TooSmall(format!(
            "{}x{} is below 64x64",
            ir.width(),
            ir.height()
        )));
    }
    let (w, h) = (ir.width(), ir.height());
    let start = Instant::now();
    let (lr, lt) = (ir.luminance(), it.luminance());
    let pr = build_pyramid(&lr, cfg.pyramid_levels)?;
    let pt = build_pyramid(&lt, cfg.pyramid_levels)?;

    let mut traces = Vec::new();
    let h0 = correlation_homography(&lr, &lt, cfg).map_err(|e| stage_error("homography", e))?;
    let homography =
        polish_homography(pr.levels(), pt.levels(), h0, cfg, &mut traces).map_err(|e| stage_error("homography", e))?;

    let mut grids: Vec<ControlGrid> = Vec::new();
    let mut fields: Vec<DisplacementField> = Vec::new();
    for i in 0..cfg.n_stages {
        let name = format!("refinement {}", i + 1);
        let level = cfg.stage_level(i);
        let refs: Vec<&DisplacementField> = fields.iter().collect();
        let full_prior =
            compose_sampling_map_with(&homography, &refs, w, h, cfg.composition).map_err(|e| stage_error(&name, e))?;
        let (li, lt) = (pr.level(level), pt.level(level));
        let prior = if level == 0 {
            full_prior
        } else {
            full_prior.downscaled(li.width(), li.height(), (1usize << level) as f64)
        };
        let mut trace = LossTrace {
            stage: i + 1,
            level,
            ..LossTrace::default()
        };
        let grid = refine(
            li,
            lt,
            &prior,
            cfg.stage_grids[i],
            cfg.weights.lambda_i[i],
            cfg,
            &mut trace,
        )
        .map_err(|e| stage_error(&name, e))?;
        traces.push(trace);
        let full = if level == 0 {
            grid
        } else {
            grid.rescaled(w, h, (1usize << level) as f64)?
        };
        if i + 1 < cfg.n_stages {
            fields.push(cfg.model.field(&full, cfg.theta)?);
        }
        grids.push(full);
    }
    let params = WarpParams {
        model: Some(cfg.model),
        theta: cfg.theta,
        homography,
        grids: grids.clone(),
        canvas: (w, h),
        composition: cfg.composition,
    };
    let inference = start.elapsed();

    let warp_start = Instant::now();
    let map = params.sampling_map()?;
    let (warped, overlap) = warp_image(it, &map);
    let warp = warp_start.elapsed();
    let total = start.elapsed();
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    Ok(RegistrationResult {
        homography,
        grids,
        params,
        map,
        warped,
        overlap,
        traces,
        timings: Timings {
            inference_ms: ms(inference),
            warp_ms: ms(warp),
            total_ms: ms(total),
        },
    })
}
