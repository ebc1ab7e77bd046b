//! Control lattices and the two free-form deformation models.

use rayon::prelude::*;

use crate::basis::{cubic_bspline, exp_nonpositive};
use crate::error::{Error, Result};

/// Weight below which the truncated exponential path skips a control point.
pub const EDFFD_CUTOFF: f64 = 1e-6;

/// Largest deviation the truncated paths may introduce relative to the full sums.
pub const TRUNCATION_TOLERANCE: f64 = 1e-5;

/// How a dense field is accumulated over control points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Evaluation {
    /// Every control point contributes to every pixel.
    #[default]
    FullSum,
    /// Only control points with a non-negligible weight are visited: the
    /// 4x4 support neighborhood for B-splines, and weights above
    /// [`EDFFD_CUTOFF`] for the exponential kernel (lowered further when the
    /// displacement mass would otherwise exceed [`TRUNCATION_TOLERANCE`]).
    Truncated,
}

/// `(rows + 1) x (cols + 1)` control points spread uniformly over a
/// `width x height` canvas, border included. Displacements are in pixels,
/// stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    rows: usize,
    cols: usize,
    width: usize,
    height: usize,
    displacements: Vec<[f64; 2]>,
}

impl ControlGrid {
    pub fn new(rows: usize, cols: usize, width: usize, height: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid {rows}x{cols} on canvas {width}x{height}"
            )));
        }
        Ok(Self {
            rows,
            cols,
            width,
            height,
            displacements: vec![[0.0; 2]; (rows + 1) * (cols + 1)],
        })
    }

    pub fn with_displacements(
        rows: usize,
        cols: usize,
        width: usize,
        height: usize,
        displacements: Vec<[f64; 2]>,
    ) -> Result<Self> {
        let mut grid = Self::new(rows, cols, width, height)?;
        if displacements.len() != grid.displacements.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} displacements for a {}x{} lattice",
                displacements.len(),
                rows + 1,
                cols + 1
            )));
        }
        if displacements.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite displacement".into()));
        }
        grid.displacements = displacements;
        Ok(grid)
    }

    /// Cell counts `(rows, cols)`.
    pub fn cells(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn canvas(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn point_count(&self) -> usize {
        (self.rows + 1) * (self.cols + 1)
    }

    /// Horizontal and vertical lattice spacing in pixels.
    pub fn spacing(&self) -> (f64, f64) {
        (
            self.width as f64 / self.cols as f64,
            self.height as f64 / self.rows as f64,
        )
    }

    #[inline]
    pub fn index(&self, m: usize, n: usize) -> usize {
        m * (self.cols + 1) + n
    }

    #[inline]
    pub fn anchor(&self, m: usize, n: usize) -> (f64, f64) {
        let (sx, sy) = self.spacing();
        (n as f64 * sx, m as f64 * sy)
    }

    pub fn anchors(&self) -> Vec<(f64, f64)> {
        (0..=self.rows)
            .flat_map(|m| (0..=self.cols).map(move |n| (m, n)))
            .map(|(m, n)| self.anchor(m, n))
            .collect()
    }

    pub fn displacement(&self, m: usize, n: usize) -> [f64; 2] {
        self.displacements[self.index(m, n)]
    }

    pub fn displacements(&self) -> &[[f64; 2]] {
        &self.displacements
    }

    pub fn displacements_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.displacements
    }

    pub fn set_displacement(&mut self, m: usize, n: usize, d: [f64; 2]) {
        let i = self.index(m, n);
        self.displacements[i] = d;
    }

    /// Deformed lattice position `anchor + displacement`.
    pub fn deformed(&self, m: usize, n: usize) -> (f64, f64) {
        let (x, y) = self.anchor(m, n);
        let d = self.displacement(m, n);
        (x + d[0], y + d[1])
    }

    /// Displacements flattened as `dx0, dy0, dx1, dy1, ...`.
    pub fn flat_displacements(&self) -> Vec<f64> {
        self.displacements.iter().flatten().copied().collect()
    }

    pub fn set_flat_displacements(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != 2 * self.displacements.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} control points",
                flat.len(),
                self.displacements.len()
            )));
        }
        for (d, c) in self.displacements.iter_mut().zip(flat.chunks_exact(2)) {
            *d = [c[0], c[1]];
        }
        Ok(())
    }

    pub fn max_abs_displacement(&self) -> f64 {
        self.displacements.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// The same lattice on a canvas `factor` times larger, displacements scaled accordingly.
    pub fn rescaled(&self, width: usize, height: usize, factor: f64) -> Result<Self> {
        let disp = self
            .displacements
            .iter()
            .map(|d| [d[0] * factor, d[1] * factor])
            .collect();
        Self::with_displacements(self.rows, self.cols, width, height, disp)
    }

    /// Isotropic spacing used by the exponential kernel.
    pub fn isotropic_spacing(&self) -> f64 {
        let (sx, sy) = self.spacing();
        sx.min(sy)
    }
}

/// Per-pixel displacement planes.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    width: usize,
    height: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl DisplacementField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            dx: vec![0.0; width * height],
            dy: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, d: [f64; 2]) -> Self {
        Self {
            width,
            height,
            dx: vec![d[0]; width * height],
            dy: vec![d[1]; width * height],
        }
    }

    pub fn new(width: usize, height: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        if dx.len() != width * height || dy.len() != width * height {
            return Err(Error::DimensionMismatch("displacement planes".into()));
        }
        if dx.iter().chain(dy.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite displacement".into()));
        }
        Ok(Self { width, height, dx, dy })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        let i = y * self.width + x;
        [self.dx[i], self.dy[i]]
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    pub fn max_abs_diff(&self, other: &DisplacementField) -> f64 {
        self.dx
            .iter()
            .zip(other.dx.iter())
            .chain(self.dy.iter().zip(other.dy.iter()))
            .fold(0.0f64, |a, (p, q)| a.max((p - q).abs()))
    }

    /// Bilinear lookup with border clamping.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 2] {
        let (w, h) = (self.width, self.height);
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let x0 = (x.floor() as usize).min(w.saturating_sub(2));
        let y0 = (y.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let lerp = |p: &[f64]| {
            let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
            let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
            top * (1.0 - fy) + bottom * fy
        };
        [lerp(&self.dx), lerp(&self.dy)]
    }

    pub(crate) fn from_planes(width: usize, height: usize, dx: Vec<f64>, dy: Vec<f64>) -> Self {
        Self { width, height, dx, dy }
    }
}

/// Control point layout flattened into structure-of-arrays form.
struct Lattice {
    px: Vec<f64>,
    py: Vec<f64>,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl Lattice {
    fn of(grid: &ControlGrid) -> Self {
        let anchors = grid.anchors();
        Self {
            px: anchors.iter().map(|a| a.0).collect(),
            py: anchors.iter().map(|a| a.1).collect(),
            dx: grid.displacements.iter().map(|d| d[0]).collect(),
            dy: grid.displacements.iter().map(|d| d[1]).collect(),
        }
    }

    /// Dense field summing `weight(x - px_k, y - py_k) * d_k` over every
    /// control point. Controls are the outer loop so the pixel loop
    /// vectorizes; each pixel still accumulates in control order.
    fn full_sum(&self, width: usize, height: usize, weight: impl Fn(f64, f64) -> f64 + Sync) -> DisplacementField {
        let xs: Vec<f64> = (0..width).map(|x| x as f64).collect();
        let mut dx = vec![0.0; width * height];
        let mut dy = vec![0.0; width * height];
        dx.par_chunks_mut(width)
            .zip(dy.par_chunks_mut(width))
            .enumerate()
            .for_each(|(y, (rx, ry))| {
                for k in 0..self.px.len() {
                    let ey = y as f64 - self.py[k];
                    accumulate_row(rx, ry, &xs, self.px[k], ey, [self.dx[k], self.dy[k]], &weight);
                }
            });
        DisplacementField::from_planes(width, height, dx, dy)
    }
}

#[inline(never)]
fn accumulate_row(
    rx: &mut [f64],
    ry: &mut [f64],
    xs: &[f64],
    px: f64,
    ey: f64,
    d: [f64; 2],
    weight: &impl Fn(f64, f64) -> f64,
) {
    for ((ax, ay), &x) in rx.iter_mut().zip(ry.iter_mut()).zip(xs) {
        let w = weight(x - px, ey);
        *ax += d[0] * w;
        *ay += d[1] * w;
    }
}

fn fill_rows(width: usize, height: usize, per_pixel: impl Fn(f64, f64) -> (f64, f64) + Sync) -> DisplacementField {
    let mut dx = vec![0.0; width * height];
    let mut dy = vec![0.0; width * height];
    dx.par_chunks_mut(width)
        .zip(dy.par_chunks_mut(width))
        .enumerate()
        .for_each(|(y, (rx, ry))| {
            for x in 0..width {
                let (a, b) = per_pixel(x as f64, y as f64);
                rx[x] = a;
                ry[x] = b;
            }
        });
    DisplacementField::from_planes(width, height, dx, dy)
}

/// Cubic B-spline free-form deformation summed over every control point.
pub fn bspline_ffd_field(grid: &ControlGrid) -> DisplacementField {
    bspline_ffd_field_with(grid, Evaluation::FullSum)
}

pub fn bspline_ffd_field_with(grid: &ControlGrid, eval: Evaluation) -> DisplacementField {
    let (w, h) = grid.canvas();
    let (sx, sy) = grid.spacing();
    let (inv_x, inv_y) = (1.0 / sx, 1.0 / sy);
    let lat = Lattice::of(grid);
    let cols = grid.cols + 1;
    let rows = grid.rows + 1;
    match eval {
        Evaluation::FullSum => lat.full_sum(w, h, move |ex, ey| {
            cubic_bspline(ex * inv_x) * cubic_bspline(ey * inv_y)
        }),
        Evaluation::Truncated => fill_rows(w, h, |x, y| {
            let (ux, uy) = (x * inv_x, y * inv_y);
            let n0 = ((ux - 2.0).floor().max(0.0)) as usize;
            let n1 = ((ux + 2.0).ceil() as usize).min(cols - 1);
            let m0 = ((uy - 2.0).floor().max(0.0)) as usize;
            let m1 = ((uy + 2.0).ceil() as usize).min(rows - 1);
            let (mut ax, mut ay) = (0.0, 0.0);
            for m in m0..=m1 {
                let by = cubic_bspline((y - lat.py[m * cols]) * inv_y);
                for n in n0..=n1 {
                    let k = m * cols + n;
                    let phi = cubic_bspline((x - lat.px[k]) * inv_x) * by;
                    ax += lat.dx[k] * phi;
                    ay += lat.dy[k] * phi;
                }
            }
            (ax, ay)
        }),
    }
}

/// Exponential-decay free-form deformation summed over every control point.
pub fn edffd_field(grid: &ControlGrid, theta: f64) -> Result<DisplacementField> {
    edffd_field_with(grid, theta, Evaluation::FullSum)
}

pub fn edffd_field_with(grid: &ControlGrid, theta: f64, eval: Evaluation) -> Result<DisplacementField> {
    let scale = theta * grid.isotropic_spacing();
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::NonPositiveScale(scale));
    }
    let (w, h) = grid.canvas();
    let inv = 1.0 / scale;
    let lat = Lattice::of(grid);
    let field = match eval {
        Evaluation::FullSum => lat.full_sum(w, h, move |ex, ey| exp_nonpositive(-(ex * ex + ey * ey).sqrt() * inv)),
        Evaluation::Truncated => {
            // Skipped terms sum to at most cutoff * sum_k |dp_k|; tighten the
            // per-weight cutoff so that bound stays within the tolerance.
            let mass: f64 = lat.dx.iter().zip(&lat.dy).map(|(a, b)| a.abs().max(b.abs())).sum();
            let weight_cutoff = EDFFD_CUTOFF.min(TRUNCATION_TOLERANCE / mass.max(f64::MIN_POSITIVE));
            let cutoff = -weight_cutoff.ln() * scale;
            let cutoff_sq = cutoff * cutoff;
            fill_rows(w, h, |x, y| {
                let (mut ax, mut ay) = (0.0, 0.0);
                for k in 0..lat.px.len() {
                    let ex = x - lat.px[k];
                    let ey = y - lat.py[k];
                    let r2 = ex * ex + ey * ey;
                    if r2 > cutoff_sq {
                        continue;
                    }
                    let wgt = exp_nonpositive(-r2.sqrt() * inv);
                    ax += lat.dx[k] * wgt;
                    ay += lat.dy[k] * wgt;
                }
                (ax, ay)
            })
        }
    };
    Ok(field)
}

/// Exponential kernel weight of every control point at each of `points`,
/// row-major `points x controls`.
pub fn edffd_weight_matrix(grid: &ControlGrid, theta: f64, points: &[(f64, f64)]) -> Result<Vec<f64>> {
    let scale = theta * grid.isotropic_spacing();
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::NonPositiveScale(scale));
    }
    let inv = 1.0 / scale;
    let anchors = grid.anchors();
    let c = anchors.len();
    let mut out = vec![0.0; points.len() * c];
    out.par_chunks_mut(c).zip(points.par_iter()).for_each(|(row, &(x, y))| {
        for (k, a) in anchors.iter().enumerate() {
            let (ex, ey) = (x - a.0, y - a.1);
            row[k] = exp_nonpositive(-(ex * ex + ey * ey).sqrt() * inv);
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::bspline_basis_product;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rows: usize, cols: usize, w: usize, h: usize, amp: f64, seed: u64) -> ControlGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = (0..(rows + 1) * (cols + 1))
            .map(|_| [rng.gen_range(-amp..amp), rng.gen_range(-amp..amp)])
            .collect();
        ControlGrid::with_displacements(rows, cols, w, h, d).unwrap()
    }

    // Direct transcription of the double sums, one control point at a time.
    fn naive_bspline(grid: &ControlGrid, x: f64, y: f64) -> [f64; 2] {
        let (sx, sy) = grid.spacing();
        let (rows, cols) = grid.cells();
        let mut acc = [0.0; 2];
        for m in 0..=rows {
            for n in 0..=cols {
                let (px, py) = grid.anchor(m, n);
                let phi = bspline_basis_product((x - px) / sx, (y - py) / sy);
                let d = grid.displacement(m, n);
                acc[0] += d[0] * phi;
                acc[1] += d[1] * phi;
            }
        }
        acc
    }

    fn naive_edffd(grid: &ControlGrid, theta: f64, x: f64, y: f64) -> [f64; 2] {
        let eta = grid.isotropic_spacing();
        let (rows, cols) = grid.cells();
        let mut acc = [0.0; 2];
        for m in 0..=rows {
            for n in 0..=cols {
                let (px, py) = grid.anchor(m, n);
                let r = ((x - px).powi(2) + (y - py).powi(2)).sqrt();
                let wgt = (-r / (theta * eta)).exp();
                let d = grid.displacement(m, n);
                acc[0] += d[0] * wgt;
                acc[1] += d[1] * wgt;
            }
        }
        acc
    }

    #[test]
    fn zero_grid_gives_zero_fields() {
        let g = ControlGrid::new(4, 5, 40, 30).unwrap();
        assert!(bspline_ffd_field(&g).dx().iter().all(|&v| v == 0.0));
        assert!(edffd_field(&g, 0.75).unwrap().dy().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn anchors_are_uniform_lattice() {
        let g = ControlGrid::new(3, 4, 64, 48).unwrap();
        assert_eq!(g.anchor(0, 0), (0.0, 0.0));
        assert_eq!(g.anchor(3, 4), (64.0, 48.0));
        assert_eq!(g.anchor(1, 2), (32.0, 16.0));
        assert_eq!(g.anchors().len(), 20);
    }

    #[test]
    fn bspline_reproduces_constant_on_interior() {
        let (rows, cols, w, h) = (6, 6, 60, 60);
        let g = ControlGrid::with_displacements(rows, cols, w, h, vec![[1.5, -2.25]; 49]).unwrap();
        let f = bspline_ffd_field(&g);
        // pixels whose 4x4 support lies inside the lattice: between knots 1 and 5
        for y in 10..=50 {
            for x in 10..=50 {
                let d = f.at(x, y);
                assert!((d[0] - 1.5).abs() < 1e-12 && (d[1] + 2.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn edffd_constant_grid_is_not_constant() {
        let g = ControlGrid::with_displacements(6, 6, 60, 60, vec![[1.0, 0.0]; 49]).unwrap();
        let f = edffd_field(&g, 0.75).unwrap();
        let (lo, hi) = f
            .dx()
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi - lo > 0.0);
    }

    #[test]
    fn edffd_single_point_at_its_anchor() {
        let mut g = ControlGrid::new(4, 4, 64, 64).unwrap();
        g.set_displacement(2, 1, [3.0, 0.0]);
        let f = edffd_field(&g, 0.75).unwrap();
        assert_eq!(f.at(16, 32), [3.0, 0.0]);
    }

    #[test]
    fn single_bspline_point_matches_naive() {
        let mut g = ControlGrid::new(5, 5, 50, 50).unwrap();
        g.set_displacement(2, 3, [2.0, -1.0]);
        let f = bspline_ffd_field(&g);
        for y in 0..50 {
            for x in 0..50 {
                let n = naive_bspline(&g, x as f64, y as f64);
                let d = f.at(x, y);
                assert!((d[0] - n[0]).abs() < 1e-12 && (d[1] - n[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fields_match_naive_oracles() {
        for seed in 0..6 {
            let g = random_grid(
                2 + seed as usize,
                3 + seed as usize,
                33 + 5 * seed as usize,
                29,
                4.0,
                seed,
            );
            let b = bspline_ffd_field(&g);
            let e = edffd_field(&g, 0.75).unwrap();
            for y in 0..29 {
                for x in 0..g.canvas().0 {
                    let nb = naive_bspline(&g, x as f64, y as f64);
                    let ne = naive_edffd(&g, 0.75, x as f64, y as f64);
                    assert!((b.at(x, y)[0] - nb[0]).abs() < 1e-9);
                    assert!((b.at(x, y)[1] - nb[1]).abs() < 1e-9);
                    assert!((e.at(x, y)[0] - ne[0]).abs() < 1e-9);
                    assert!((e.at(x, y)[1] - ne[1]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn truncated_paths_match_full_sums() {
        let g = random_grid(12, 12, 128, 96, 5.0, 42);
        let full = bspline_ffd_field_with(&g, Evaluation::FullSum);
        let fast = bspline_ffd_field_with(&g, Evaluation::Truncated);
        assert!(full.max_abs_diff(&fast) < 1e-12, "{}", full.max_abs_diff(&fast));
        let g = random_grid(12, 12, 256, 256, 5.0, 43);
        let full = edffd_field_with(&g, 0.25, Evaluation::FullSum).unwrap();
        let fast = edffd_field_with(&g, 0.25, Evaluation::Truncated).unwrap();
        assert!(full.max_abs_diff(&fast) < TRUNCATION_TOLERANCE);
    }

    #[test]
    fn weight_matrix_reproduces_field() {
        let g = random_grid(3, 3, 30, 30, 3.0, 1);
        let pts = vec![(0.0, 0.0), (12.0, 7.0), (29.0, 29.0)];
        let wm = edffd_weight_matrix(&g, 0.75, &pts).unwrap();
        let f = edffd_field(&g, 0.75).unwrap();
        for (i, &(x, y)) in pts.iter().enumerate() {
            let row = &wm[i * 16..(i + 1) * 16];
            let dx: f64 = row.iter().zip(g.displacements()).map(|(w, d)| w * d[0]).sum();
            assert!((dx - f.at(x as usize, y as usize)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn edffd_rejects_bad_theta() {
        let g = ControlGrid::new(2, 2, 10, 10).unwrap();
        assert!(matches!(edffd_field(&g, 0.0), Err(Error::NonPositiveScale(_))));
        assert!(matches!(edffd_field(&g, -1.0), Err(Error::NonPositiveScale(_))));
    }

    #[test]
    fn edffd_locality_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..5 {
            let g = random_grid(6, 6, 64, 64, 3.0, 100 + seed);
            let base = edffd_field(&g, 0.75).unwrap();
            let (m, n) = (rng.gen_range(0..=6), rng.gen_range(0..=6));
            let delta = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let mut g2 = g.clone();
            let d = g2.displacement(m, n);
            g2.set_displacement(m, n, [d[0] + delta[0], d[1] + delta[1]]);
            let pert = edffd_field(&g2, 0.75).unwrap();
            let (px, py) = g.anchor(m, n);
            let scale = 0.75 * g.isotropic_spacing();
            let dn = (delta[0].powi(2) + delta[1].powi(2)).sqrt();
            for y in 0..64 {
                for x in 0..64 {
                    let dist = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt();
                    let a = base.at(x, y);
                    let b = pert.at(x, y);
                    let change = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                    assert!(change <= dn * (-dist / scale).exp() + 1e-12);
                }
            }
        }
    }
}
