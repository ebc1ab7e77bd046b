//! Built-in property suite and synthetic registration suite.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{asma_backward, asma_forward, param_count, AsmaHead, GroupLinear, MlpHead};
use crate::basis::{corrupted_cubic_bspline, cubic_bspline};
use crate::correlation::{global_correlation, local_correlation, volume_to_flow, FeatureMap};
use crate::energies::{inter_grid_loss, intra_grid_loss, total_loss, MotionParams, PhotometricObjective};
use crate::error::{Error, Result};
use crate::image::{psnr_masked, Mask};
use crate::params::WarpParams;
use crate::pipeline::{register, RegistrationConfig};
use crate::synthetic::{generate_pair, interior_endpoint_error, natural_image, PairSpec, SyntheticPair, Texture};
use crate::warp::{
    bspline_ffd_field, bspline_ffd_field_with, compose_sampling_map, edffd_field, edffd_field_with, fit_homography,
    four_point_to_homography, warp_image, Composition, ControlGrid, DeformationModel, Evaluation, FourPointMotion,
    SamplingMap, TRUNCATION_TOLERANCE,
};

/// Endpoint-error bound of the registration suite, pixels.
pub const MAX_ENDPOINT_ERROR: f64 = 1.0;
/// Required masked PSNR gain over the unregistered pair, dB.
pub const MIN_PSNR_GAIN: f64 = 10.0;
/// Pixels excluded at the canvas edge when measuring endpoint error.
pub const EPE_BORDER: usize = 16;
/// Seed of the first synthetic pair.
pub const PAIR_SEED: u64 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct SelfcheckOptions {
    /// Registration pairs to run.
    pub pairs: usize,
    /// Where to write the synthetic fixtures, if anywhere.
    pub emit: Option<PathBuf>,
    /// Check a perturbed B-spline instead of the real one.
    pub corrupt_basis: bool,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        Self {
            pairs: 3,
            emit: None,
            corrupt_basis: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Every check, in table order. Errors raised inside a check count as failures.
pub fn run(opts: &SelfcheckOptions) -> Vec<CheckResult> {
    let basis = if opts.corrupt_basis {
        corrupted_cubic_bspline
    } else {
        cubic_bspline
    };
    let checks: Vec<(&str, Box<dyn Fn() -> Result<(bool, String)>>)> = vec![
        ("basis: exact knot values", Box::new(move || basis_values(basis))),
        ("basis: partition of unity", Box::new(move || partition_of_unity(basis))),
        ("basis: C2 continuity at knots", Box::new(move || continuity(basis))),
        ("fields: full sums match oracles", Box::new(field_oracles)),
        ("fields: truncated paths match full sums", Box::new(truncation)),
        ("warp: identity reproduces input", Box::new(identity_warp)),
        ("homography: four-point round trip", Box::new(four_point_round_trip)),
        ("energies: photometric gradients", Box::new(photometric_gradients)),
        (
            "energies: shape losses vanish on undeformed grids",
            Box::new(shape_zero),
        ),
        ("energies: total loss linear in omega", Box::new(linear_in_omega)),
        ("correlation: integer shift recovery", Box::new(shift_recovery)),
        ("aggregator: grouped weight count", Box::new(weight_counts)),
        ("aggregator: backward matches differences", Box::new(asma_gradient)),
        ("params: JSON round trip", Box::new(params_round_trip)),
        ("pipeline: determinism", Box::new(determinism)),
    ];
    let mut out: Vec<CheckResult> = checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => CheckResult::new(name, passed, detail),
            Err(e) => CheckResult::new(name, false, format!("error: {e}")),
        })
        .collect();
    out.extend(registration_suite(opts));
    out
}

/// Fixed-width pass/fail table.
pub fn format_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for r in results {
        s.push_str(&format!(
            "{:<width$}  {}  {}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    s.push_str(&format!("{} checks, {} failed\n", results.len(), failed));
    s
}

/// Synthetic pair `i` of the suite.
pub fn suite_pair(i: usize) -> Result<SyntheticPair> {
    generate_pair(&PairSpec::default(), PAIR_SEED + i as u64)
}

/// Ground truth of a pair as a parameter document.
pub fn truth_params(pair: &SyntheticPair, spec: &PairSpec) -> WarpParams {
    WarpParams {
        model: Some(DeformationModel::Edffd),
        theta: spec.theta,
        homography: pair.homography,
        grids: vec![pair.grid.clone()],
        canvas: (spec.width, spec.height),
        composition: Composition::Additive,
    }
}

/// Writes `pair_NN_reference.png`, `pair_NN_target.png` and `pair_NN_truth.json`.
pub fn emit_pair(dir: &Path, i: usize, pair: &SyntheticPair) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    pair.reference.save(dir.join(format!("pair_{i:02}_reference.png")))?;
    pair.target.save(dir.join(format!("pair_{i:02}_target.png")))?;
    let path = dir.join(format!("pair_{i:02}_truth.json"));
    std::fs::write(&path, truth_params(pair, &PairSpec::default()).to_json_string())
        .map_err(|source| Error::Io { path, source })
}

fn registration_suite(opts: &SelfcheckOptions) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for i in 0..opts.pairs {
        let name = format!("registration: synthetic pair {i}");
        let result = (|| -> Result<(bool, String)> {
            let pair = suite_pair(i)?;
            if let Some(dir) = &opts.emit {
                emit_pair(dir, i, &pair)?;
            }
            let (w, h) = (pair.reference.width(), pair.reference.height());
            let before = psnr_masked(&pair.reference, &pair.target, &Mask::ones(w, h))?;
            let r = register(&pair.reference, &pair.target, &RegistrationConfig::default())?;
            let after = psnr_masked(&pair.reference, &r.warped, &r.overlap)?;
            let epe = interior_endpoint_error(&r.map, &pair.truth, EPE_BORDER);
            let epe_h = interior_endpoint_error(
                &compose_sampling_map(&r.homography, &[], w, h)?,
                &pair.truth,
                EPE_BORDER,
            );
            let ok = epe < MAX_ENDPOINT_ERROR && after - before >= MIN_PSNR_GAIN && epe <= epe_h;
            Ok((
                ok,
                format!(
                    "EPE {epe:.3} px (homography {epe_h:.3}), PSNR {before:.1} -> {after:.1} dB, {:.0} ms",
                    r.timings.total_ms
                ),
            ))
        })();
        out.push(match result {
            Ok((passed, detail)) => CheckResult::new(&name, passed, detail),
            Err(e) => CheckResult::new(&name, false, format!("error: {e}")),
        });
    }
    out
}

fn basis_values(b: fn(f64) -> f64) -> Result<(bool, String)> {
    let (v0, v1, v2) = (b(0.0), b(1.0), b(2.0));
    Ok((
        v0 == 2.0 / 3.0 && v1 == 1.0 / 6.0 && v2 == 0.0,
        format!("b(0) = {v0:.17}, b(1) = {v1:.17}, b(2) = {v2}"),
    ))
}

fn partition_of_unity(b: fn(f64) -> f64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let u: f64 = rng.gen_range(-50.0..50.0);
        let base = u.floor() as i64;
        let s: f64 = (base - 3..=base + 3).map(|k| b(u - k as f64)).sum();
        worst = worst.max((s - 1.0).abs());
    }
    Ok((worst < 1e-12, format!("largest deviation {worst:.1e}")))
}

/// Value, slope and curvature from one side, extrapolated over two steps.
fn one_sided(b: fn(f64) -> f64, x: f64, sign: f64, h: f64) -> [f64; 3] {
    let est = |h: f64| {
        let (p, q, r) = (b(x), b(x + sign * h), b(x + sign * 2.0 * h));
        [
            p,
            sign * (-3.0 * p + 4.0 * q - r) / (2.0 * h),
            (p - 2.0 * q + r) / (h * h),
        ]
    };
    let (a, c) = (est(h), est(h / 2.0));
    [a[0], (4.0 * c[1] - a[1]) / 3.0, 2.0 * c[2] - a[2]]
}

fn continuity(b: fn(f64) -> f64) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for knot in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        let (l, r) = (one_sided(b, knot, -1.0, 1e-2), one_sided(b, knot, 1.0, 1e-2));
        for d in 0..3 {
            worst = worst.max((l[d] - r[d]).abs());
        }
    }
    Ok((worst < 1e-6, format!("largest jump {worst:.1e}")))
}

fn random_grid(rng: &mut ChaCha8Rng, rows: usize, cols: usize, w: usize, h: usize, amp: f64) -> Result<ControlGrid> {
    let d = (0..(rows + 1) * (cols + 1))
        .map(|_| [rng.gen_range(-amp..amp), rng.gen_range(-amp..amp)])
        .collect();
    ControlGrid::with_displacements(rows, cols, w, h, d)
}

fn field_oracles() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let (w, h) = (rng.gen_range(8..=48), rng.gen_range(8..=48));
        let (rows, cols) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let grid = random_grid(&mut rng, rows, cols, w, h, 5.0)?;
        let (sx, sy) = grid.spacing();
        let scale = 0.75 * sx.min(sy);
        let fb = bspline_ffd_field(&grid);
        let fe = edffd_field(&grid, 0.75)?;
        let (rows, cols) = grid.cells();
        for y in 0..h {
            for x in 0..w {
                let (mut b, mut e) = ([0.0; 2], [0.0; 2]);
                for m in 0..=rows {
                    for n in 0..=cols {
                        let (px, py) = grid.anchor(m, n);
                        let (dx, dy) = (x as f64 - px, y as f64 - py);
                        let d = grid.displacement(m, n);
                        let wb = cubic_bspline(dx / sx) * cubic_bspline(dy / sy);
                        let we = (-(dx * dx + dy * dy).sqrt() / scale).exp();
                        for k in 0..2 {
                            b[k] += wb * d[k];
                            e[k] += we * d[k];
                        }
                    }
                }
                let (gb, ge) = (fb.at(x, y), fe.at(x, y));
                for k in 0..2 {
                    worst = worst.max((gb[k] - b[k]).abs()).max((ge[k] - e[k]).abs());
                }
            }
        }
    }
    Ok((worst < 1e-6, format!("largest deviation {worst:.1e}")))
}

fn truncation() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = random_grid(&mut rng, 12, 12, 192, 160, 5.0)?;
    let b = bspline_ffd_field(&grid).max_abs_diff(&bspline_ffd_field_with(&grid, Evaluation::Truncated));
    let e = edffd_field(&grid, 0.75)?.max_abs_diff(&edffd_field_with(&grid, 0.75, Evaluation::Truncated)?);
    Ok((
        b <= TRUNCATION_TOLERANCE && e <= TRUNCATION_TOLERANCE,
        format!("B-spline {b:.1e}, exponential {e:.1e}"),
    ))
}

fn identity_warp() -> Result<(bool, String)> {
    let img = natural_image(96, 80, 4);
    let (w, h) = (img.width(), img.height());
    let grid = ControlGrid::new(6, 6, w, h)?;
    let hom = four_point_to_homography(&FourPointMotion::zero(), w, h)?;
    let mut worst = f64::INFINITY;
    for model in [
        DeformationModel::Edffd,
        DeformationModel::Bspline,
        DeformationModel::Tps,
    ] {
        let field = model.field(&grid, 0.75)?;
        let (out, mask) = warp_image(&img, &compose_sampling_map(&hom, &[&field], w, h)?);
        worst = worst.min(psnr_masked(&img, &out, &mask)?);
    }
    Ok((worst > 50.0, format!("lowest PSNR {worst:.1} dB")))
}

fn four_point_round_trip() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let flat: [f64; 8] = std::array::from_fn(|_| rng.gen_range(-20.0..20.0));
        let m = FourPointMotion::from_flat(&flat);
        let h = four_point_to_homography(&m, 256, 192)?;
        let back = FourPointMotion::from_homography(&h, 256, 192)?.to_flat();
        worst = back.iter().zip(&flat).fold(worst, |a, (x, y)| a.max((x - y).abs()));
        let src: Vec<(f64, f64)> = (0..12)
            .map(|_| (rng.gen_range(0.0..256.0), rng.gen_range(0.0..192.0)))
            .collect();
        let dst = h.apply_points(&src)?;
        let fit = fit_homography(&src, &dst, None)?;
        for (p, q) in fit.apply_points(&src)?.iter().zip(&dst) {
            worst = worst.max((p.0 - q.0).abs()).max((p.1 - q.1).abs());
        }
    }
    Ok((worst < 1e-6, format!("largest corner or fit deviation {worst:.1e} px")))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn central_differences(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], step: f64) -> Result<Vec<f64>> {
    (0..x.len())
        .map(|k| {
            let mut p = x.to_vec();
            p[k] += step;
            let fp = f(&p)?;
            p[k] -= 2.0 * step;
            Ok((fp - f(&p)?) / (2.0 * step))
        })
        .collect()
}

fn photometric_gradients() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tex = Texture::random(32, 32, 8.0, (2.5, 6.0), &mut rng);
    let it = tex.render(&SamplingMap::identity(32, 32));
    let ir = tex.render(&SamplingMap::from_fn(32, 32, |x, y| (x + 0.6, y - 0.4)));
    let prior = SamplingMap::identity(32, 32);
    let flat: [f64; 8] = std::array::from_fn(|_| rng.gen_range(-1.5..1.5));
    let grid = random_grid(&mut rng, 4, 4, 32, 32, 1.5)?;
    let mut worst = 0.0f64;
    for params in [
        MotionParams::Homography(FourPointMotion::from_flat(&flat)),
        MotionParams::Grid(grid),
    ] {
        let obj = PhotometricObjective::new(&ir, &it, &params, &prior, 0.75, 1)?;
        let an = obj.value_and_grad(&params)?.grad;
        let fd = central_differences(|p| obj.value(&params.with_flat(p)?), &params.flat(), 1e-5)?;
        worst = worst.max(rel_err(&an, &fd));
    }
    Ok((worst < 1e-4, format!("largest relative error {worst:.1e}")))
}

fn shape_zero() -> Result<(bool, String)> {
    let grid = ControlGrid::new(6, 8, 200, 150)?;
    let overlap = Mask::new(
        200,
        150,
        (0..200 * 150).map(|i| ((i % 200) < 90) as u8 as f64).collect(),
    )?;
    let (a, b) = (intra_grid_loss(&grid), inter_grid_loss(&grid, &overlap)?);
    Ok((a == 0.0 && b.abs() < 1e-15, format!("intra {a:.1e}, inter {b:.1e}")))
}

fn linear_in_omega() -> Result<(bool, String)> {
    let (c, s) = (0.37, 0.055);
    let l: Vec<f64> = [1.0, 10.0, 25.0].iter().map(|&w| total_loss(c, s, w)).collect();
    let slope = (l[1] - l[0]) / 9.0;
    let dev = (slope - s).abs().max((l[0] + 24.0 * slope - l[2]).abs());
    Ok((dev < 1e-12, format!("deviation {dev:.1e}")))
}

fn random_features(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Result<FeatureMap> {
    let mut data: Vec<f64> = (0..w * h * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for cell in data.chunks_exact_mut(8) {
        let n = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
        cell.iter_mut().for_each(|v| *v /= n);
    }
    FeatureMap::new(w, h, 8, data)
}

fn shift_recovery() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 16usize;
    let mut misses = 0;
    for (sx, sy) in [(3isize, -2isize), (-4, 4), (0, 1)] {
        let fr = random_features(n, n, &mut rng)?;
        let filler = random_features(n, n, &mut rng)?;
        let mut data = filler.data().to_vec();
        for y in 0..n as isize {
            for x in 0..n as isize {
                let (ox, oy) = (x - sx, y - sy);
                if (0..n as isize).contains(&ox) && (0..n as isize).contains(&oy) {
                    let i = (y as usize * n + x as usize) * 8;
                    data[i..i + 8].copy_from_slice(fr.cell(ox as usize, oy as usize));
                }
            }
        }
        let ft = FeatureMap::new(n, n, 8, data)?;
        let flow = volume_to_flow(&global_correlation(&fr, &ft, 3)?, 10.0)?;
        let local = local_correlation(&fr, &ft, 4)?;
        for y in 1..n as isize - 1 {
            for x in 1..n as isize - 1 {
                let (tx, ty) = (x + sx, y + sy);
                if tx < 1 || ty < 1 || tx > n as isize - 2 || ty > n as isize - 2 {
                    continue;
                }
                misses += usize::from(flow.at(x as usize, y as usize) != [sx as f64, sy as f64]);
                let c = local.cell(x as usize, y as usize);
                let best = (0..c.len()).fold(0, |b, k| if c[k] > c[b] { k } else { b });
                misses += usize::from(local.offset(best) != (sx, sy));
            }
        }
    }
    Ok((misses == 0, format!("{misses} misses")))
}

fn weight_counts() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = GroupLinear::xavier(256, 128, 8, &mut rng)?;
    let widths = [400, 256, 128, 8];
    let asma = param_count(&AsmaHead::init(widths, 8, 1)?).0;
    let mlp = param_count(&MlpHead::init(widths, 1)?).0;
    let ratio = asma as f64 / mlp as f64;
    Ok((
        g.param_count().0 * 8 == 256 * 128 && ratio < 0.4,
        format!("ASMA / MLP weights {ratio:.3}"),
    ))
}

fn asma_gradient() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let init = AsmaHead::init([16, 16, 8, 4], 4, 3)?;
    let layers: Vec<GroupLinear> = init
        .layers()
        .iter()
        .map(|g| {
            let biases = (0..g.out_width()).map(|_| rng.gen_range(-0.5..0.5)).collect();
            GroupLinear::from_parts(g.groups(), g.in_width(), g.out_width(), g.weights().to_vec(), biases)
        })
        .collect::<Result<_>>()?;
    let head = AsmaHead::new(layers[0].clone(), layers[1].clone(), layers[2].clone())?;
    let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let up: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss =
        |h: &AsmaHead, x: &[f64]| -> Result<f64> { Ok(asma_forward(x, h)?.iter().zip(&up).map(|(a, b)| a * b).sum()) };
    let (gx, grads) = asma_backward(&x, &head, &up)?;
    let mut worst = rel_err(&gx, &central_differences(|p| loss(&head, p), &x, 1e-6)?);
    for l in 0..3 {
        let g = &layers[l];
        let with_weights = |w: &[f64]| -> Result<AsmaHead> {
            let mut ls = layers.clone();
            ls[l] = GroupLinear::from_parts(g.groups(), g.in_width(), g.out_width(), w.to_vec(), g.biases().to_vec())?;
            AsmaHead::new(ls[0].clone(), ls[1].clone(), ls[2].clone())
        };
        let fd = central_differences(|p| loss(&with_weights(p)?, &x), g.weights(), 1e-6)?;
        worst = worst.max(rel_err(&grads.layers[l].weights, &fd));
    }
    Ok((worst < 1e-5, format!("largest relative error {worst:.1e}")))
}

fn params_round_trip() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grid = random_grid(&mut rng, 5, 7, 120, 90, 3.0)?;
    let p = WarpParams {
        model: Some(DeformationModel::Edffd),
        theta: 0.75,
        homography: four_point_to_homography(&FourPointMotion::uniform(1.25, -0.5), 120, 90)?,
        grids: vec![grid],
        canvas: (120, 90),
        composition: Composition::Additive,
    };
    let back = WarpParams::from_json_str(&p.to_json_string())?;
    let same = back == p && back.to_json_string() == p.to_json_string();
    Ok((same, format!("bit-exact: {same}")))
}

fn determinism() -> Result<(bool, String)> {
    let spec = PairSpec {
        width: 96,
        height: 96,
        corner_max: 5.0,
        displacement_max: 2.0,
        grid: (6, 6),
        theta: 0.75,
    };
    let pair = generate_pair(&spec, 77)?;
    let cfg = RegistrationConfig {
        stage_grids: vec![(6, 6), (9, 9)],
        n_stages: 2,
        max_iterations: 20,
        ..RegistrationConfig::default()
    };
    let a = register(&pair.reference, &pair.target, &cfg)?;
    let b = register(&pair.reference, &pair.target, &cfg)?;
    let same = a.map == b.map && a.warped == b.warped && a.params == b.params && a.traces == b.traces;
    Ok((same, format!("bitwise identical: {same}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_basis_is_caught() {
        assert!(!partition_of_unity(corrupted_cubic_bspline).unwrap().0);
        assert!(!basis_values(corrupted_cubic_bspline).unwrap().0);
        assert!(partition_of_unity(cubic_bspline).unwrap().0);
        assert!(continuity(cubic_bspline).unwrap().0);
    }

    #[test]
    fn table_lists_failures() {
        let rows = vec![
            CheckResult::new("a", true, "ok".into()),
            CheckResult::new("bb", false, "bad".into()),
        ];
        let t = format_table(&rows);
        assert!(t.contains("a   PASS  ok"));
        assert!(t.contains("bb  FAIL  bad"));
        assert!(t.ends_with("2 checks, 1 failed\n"));
    }
}
