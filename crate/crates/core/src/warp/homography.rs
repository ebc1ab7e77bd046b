use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};

const W_EPS: f64 = 1e-12;
const RANK_TOL: f64 = 1e-9;

/// 3x3 projective transform, normalized so that `h[2][2] == 1` when that entry is nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular);
        }
        let m = if m[(2, 2)].abs() > W_EPS { m / m[(2, 2)] } else { m };
        let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if scale == 0.0 || (m / scale).determinant().abs() < W_EPS {
            return Err(Error::Singular);
        }
        Ok(Self { m })
    }

    /// Row-major entries.
    pub fn from_row_slice(h: &[f64; 9]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_row_slice(h))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn to_row_array(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.m[(r, c)];
            }
        }
        out
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let m = &self.m;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if w.abs() < W_EPS {
            return Err(Error::AtInfinity);
        }
        let u = (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w;
        let v = (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w;
        Ok((u, v))
    }

    pub fn apply_points(&self, pts: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
        pts.iter().map(|&(x, y)| self.apply(x, y)).collect()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.m.try_inverse().ok_or(Error::Singular)?;
        Self::from_matrix(inv)
    }

    /// `self` applied after `other`.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_matrix(self.m * other.m)
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        (self.m - Matrix3::identity()).iter().all(|v| v.abs() <= tol)
    }
}

pub fn apply_homography(h: &Homography, pts: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    h.apply_points(pts)
}

pub fn invert_homography(h: &Homography) -> Result<Homography> {
    h.inverse()
}

/// Displacements of the canvas corners, ordered TL, TR, BL, BR.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FourPointMotion {
    pub corners: [[f64; 2]; 4],
}

impl FourPointMotion {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn uniform(dx: f64, dy: f64) -> Self {
        Self { corners: [[dx, dy]; 4] }
    }

    pub fn from_flat(p: &[f64; 8]) -> Self {
        let mut corners = [[0.0; 2]; 4];
        for (k, c) in corners.iter_mut().enumerate() {
            *c = [p[2 * k], p[2 * k + 1]];
        }
        Self { corners }
    }

    pub fn to_flat(&self) -> [f64; 8] {
        let mut out = [0.0; 8];
        for (k, c) in self.corners.iter().enumerate() {
            out[2 * k] = c[0];
            out[2 * k + 1] = c[1];
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.corners.iter().flatten().all(|v| v.is_finite())
    }

    /// Corner motion induced by `h` on a `width x height` canvas.
    pub fn from_homography(h: &Homography, width: usize, height: usize) -> Result<Self> {
        let src = canvas_corners(width, height);
        let mut corners = [[0.0; 2]; 4];
        for (c, s) in corners.iter_mut().zip(src.iter()) {
            let (u, v) = h.apply(s.0, s.1)?;
            *c = [u - s.0, v - s.1];
        }
        Ok(Self { corners })
    }
}

/// Canvas corners TL, TR, BL, BR. The right and bottom corners sit at `width`
/// and `height`, matching the control lattice border.
pub fn canvas_corners(width: usize, height: usize) -> [(f64, f64); 4] {
    let (w, h) = (width as f64, height as f64);
    [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
}

/// Homography mapping each canvas corner onto its displaced position.
pub fn four_point_to_homography(motion: &FourPointMotion, width: usize, height: usize) -> Result<Homography> {
    if !motion.is_finite() {
        return Err(Error::DegenerateCorners);
    }
    let src = canvas_corners(width, height);
    let dst: Vec<(f64, f64)> = src
        .iter()
        .zip(motion.corners.iter())
        .map(|(s, d)| (s.0 + d[0], s.1 + d[1]))
        .collect();
    if has_collinear_triple(&src) || has_collinear_triple(&dst) {
        return Err(Error::DegenerateCorners);
    }
    fit_homography(&src, &dst, None).map_err(|e| match e {
        Error::Singular | Error::SingularSystem => Error::DegenerateCorners,
        e => e,
    })
}

fn has_collinear_triple(pts: &[(f64, f64)]) -> bool {
    let scale = pts.iter().flat_map(|p| [p.0.abs(), p.1.abs()]).fold(1.0f64, f64::max);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                let (a, b, c) = (pts[i], pts[j], pts[k]);
                let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
                if cross.abs() < RANK_TOL * scale * scale {
                    return true;
                }
            }
        }
    }
    false
}

/// Similarity transform moving points to zero mean with RMS distance sqrt(2).
fn hartley_normalization(pts: &[(f64, f64)], weights: Option<&[f64]>) -> Matrix3<f64> {
    let mut wsum = 0.0;
    let (mut cx, mut cy) = (0.0, 0.0);
    for (i, p) in pts.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        cx += w * p.0;
        cy += w * p.1;
        wsum += w;
    }
    cx /= wsum;
    cy /= wsum;
    let mut ms = 0.0;
    for (i, p) in pts.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        ms += w * ((p.0 - cx).powi(2) + (p.1 - cy).powi(2));
    }
    let rms = (ms / wsum).sqrt();
    let s = if rms > 1e-12 {
        std::f64::consts::SQRT_2 / rms
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Normalized direct linear transform over `src -> dst` correspondences,
/// optionally confidence-weighted. Solves for the nullspace of the stacked
/// `2n x 9` system by SVD.
pub fn fit_homography(src: &[(f64, f64)], dst: &[(f64, f64)], weights: Option<&[f64]>) -> Result<Homography> {
    let n = src.len();
    if n < 4 || dst.len() != n || weights.is_some_and(|w| w.len() != n) {
        return Err(Error::DegenerateCorners);
    }
    let ts = hartley_normalization(src, weights);
    let td = hartley_normalization(dst, weights);
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for k in 0..n {
        let w = weights.map_or(1.0, |w| w[k]).max(0.0).sqrt();
        let s = ts * Vector3::new(src[k].0, src[k].1, 1.0);
        let d = td * Vector3::new(dst[k].0, dst[k].1, 1.0);
        let (x, y) = (s[0], s[1]);
        let (u, v) = (d[0], d[1]);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * k, c)] = w * r0[c];
            a[(2 * k + 1, c)] = w * r1[c];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.as_ref().ok_or(Error::SingularSystem)?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let (smallest, second) = (order[0], order[1]);
    let largest = sv[order[order.len() - 1]];
    if largest <= 0.0 || sv[second] / largest < RANK_TOL {
        return Err(Error::DegenerateCorners);
    }
    let h = vt.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().ok_or(Error::SingularSystem)?;
    Homography::from_matrix(td_inv * hn * ts)
}

/// Homography from a corner motion together with the derivative of every
/// matrix entry (row-major) with respect to each of the eight motion
/// components (ordered as [`FourPointMotion::to_flat`]).
///
/// Uses the `h[2][2] = 1` parameterization, in which the eight remaining
/// entries solve an 8x8 linear system; derivatives follow from implicit
/// differentiation of that system.
pub fn four_point_jacobian(
    motion: &FourPointMotion,
    width: usize,
    height: usize,
) -> Result<(Homography, [[f64; 9]; 8])> {
    let s = width.max(height) as f64;
    let src = canvas_corners(width, height);
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for k in 0..4 {
        let (x, y) = (src[k].0 / s, src[k].1 / s);
        let u = (src[k].0 + motion.corners[k][0]) / s;
        let v = (src[k].1 + motion.corners[k][1]) / s;
        let r0 = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y];
        let r1 = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y];
        for c in 0..8 {
            a[(2 * k, c)] = r0[c];
            a[(2 * k + 1, c)] = r1[c];
        }
        b[2 * k] = u;
        b[2 * k + 1] = v;
    }
    let lu = a.lu();
    let hv = lu.solve(&b).ok_or(Error::DegenerateCorners)?;
    let hn = Matrix3::new(hv[0], hv[1], hv[2], hv[3], hv[4], hv[5], hv[6], hv[7], 1.0);
    // Undo the 1/s coordinate scaling: H = T^-1 Hn T with T = diag(1/s, 1/s, 1).
    let t = Matrix3::new(1.0 / s, 0.0, 0.0, 0.0, 1.0 / s, 0.0, 0.0, 0.0, 1.0);
    let t_inv = Matrix3::new(s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0);
    let h = Homography::from_matrix(t_inv * hn * t).map_err(|_| Error::DegenerateCorners)?;

    let mut jac = [[0.0; 9]; 8];
    for k in 0..4 {
        let (x, y) = (src[k].0 / s, src[k].1 / s);
        let denom = 1.0 + hv[6] * x + hv[7] * y;
        for axis in 0..2 {
            let mut rhs = SVector::<f64, 8>::zeros();
            // d(u_k)/d(motion) = 1/s in normalized coordinates
            rhs[2 * k + axis] = denom / s;
            let dh = lu.solve(&rhs).ok_or(Error::DegenerateCorners)?;
            let dhn = Matrix3::new(dh[0], dh[1], dh[2], dh[3], dh[4], dh[5], dh[6], dh[7], 0.0);
            let dm = t_inv * dhn * t;
            let col = &mut jac[2 * k + axis];
            for r in 0..3 {
                for c in 0..3 {
                    col[r * 3 + c] = dm[(r, c)];
                }
            }
        }
    }
    Ok((h, jac))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_mat_close(a: &Homography, b: &[f64; 9], tol: f64) {
        let arr = a.to_row_array();
        for i in 0..9 {
            assert!((arr[i] - b[i]).abs() < tol, "entry {i}: {} vs {}", arr[i], b[i]);
        }
    }

    #[test]
    fn zero_motion_is_identity() {
        let h = four_point_to_homography(&FourPointMotion::zero(), 256, 128).unwrap();
        assert_mat_close(&h, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 1e-12);
    }

    #[test]
    fn uniform_motion_is_translation() {
        let h = four_point_to_homography(&FourPointMotion::uniform(5.0, -3.0), 64, 64).unwrap();
        assert_mat_close(&h, &[1.0, 0.0, 5.0, 0.0, 1.0, -3.0, 0.0, 0.0, 1.0], 1e-10);
        assert_eq!(
            h.apply(0.0, 0.0)
                .map(|(x, y)| ((x * 1e9).round(), (y * 1e9).round()))
                .unwrap(),
            (5e9, -3e9)
        );
    }

    #[test]
    fn doubling_corners_is_scaling() {
        let (w, h) = (40usize, 30usize);
        let corners = canvas_corners(w, h);
        let mut motion = FourPointMotion::zero();
        for (c, p) in motion.corners.iter_mut().zip(corners.iter()) {
            *c = [p.0, p.1];
        }
        let hm = four_point_to_homography(&motion, w, h).unwrap();
        assert_mat_close(&hm, &[2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0], 1e-10);
        let (x, y) = hm.apply(3.0, 4.0).unwrap();
        assert!((x - 6.0).abs() < 1e-9 && (y - 8.0).abs() < 1e-9);
    }

    #[test]
    fn collapsed_corners_are_degenerate() {
        let mut motion = FourPointMotion::zero();
        // TR onto TL
        motion.corners[1] = [-64.0, 0.0];
        assert!(matches!(
            four_point_to_homography(&motion, 64, 64),
            Err(Error::DegenerateCorners)
        ));
        // BR onto the TL-TR line
        let mut motion = FourPointMotion::zero();
        motion.corners[3] = [0.0, -64.0];
        assert!(matches!(
            four_point_to_homography(&motion, 64, 64),
            Err(Error::DegenerateCorners)
        ));
    }

    #[test]
    fn corners_map_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut motion = FourPointMotion::zero();
            for c in motion.corners.iter_mut() {
                *c = [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)];
            }
            let h = four_point_to_homography(&motion, 256, 256).unwrap();
            for (s, d) in canvas_corners(256, 256).iter().zip(motion.corners.iter()) {
                let (u, v) = h.apply(s.0, s.1).unwrap();
                assert!((u - s.0 - d[0]).abs() < 1e-8 && (v - s.1 - d[1]).abs() < 1e-8);
            }
            let back = FourPointMotion::from_homography(&h, 256, 256).unwrap();
            for (a, b) in back.to_flat().iter().zip(motion.to_flat().iter()) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn apply_examples() {
        let pts = [(0.0, 0.0), (3.0, 4.0), (-2.5, 7.0)];
        assert_eq!(Homography::identity().apply_points(&pts).unwrap(), pts.to_vec());
        assert_eq!(Homography::translation(5.0, -3.0).apply(0.0, 0.0).unwrap(), (5.0, -3.0));
        let s = Homography::from_row_slice(&[2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(s.apply(3.0, 4.0).unwrap(), (6.0, 8.0));
    }

    #[test]
    fn apply_at_infinity() {
        let h = Homography::from_row_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(matches!(h.apply(-1.0, 5.0), Err(Error::AtInfinity)));
    }

    #[test]
    fn inverse_examples() {
        assert!(Homography::identity().inverse().unwrap().is_identity(0.0));
        let t = Homography::translation(5.0, -3.0).inverse().unwrap();
        assert_mat_close(&t, &[1.0, 0.0, -5.0, 0.0, 1.0, 3.0, 0.0, 0.0, 1.0], 1e-15);
        let singular = Matrix3::new(1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0);
        assert!(matches!(Homography::from_matrix(singular), Err(Error::Singular)));
    }

    #[test]
    fn inverse_product_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = Matrix3::new(
                1.0 + rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-0.2..0.2),
                1.0 + rng.gen_range(-0.2..0.2),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-1e-3..1e-3),
                rng.gen_range(-1e-3..1e-3),
                1.0,
            );
            let h = Homography::from_matrix(m).unwrap();
            let inv = h.inverse().unwrap();
            // plain matrix-product oracle
            let mut prod = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    for k in 0..3 {
                        prod[r][c] += h.matrix()[(r, k)] * inv.matrix()[(k, c)];
                    }
                }
            }
            let norm = prod[2][2];
            for (r, row) in prod.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    let expect = if r == c { 1.0 } else { 0.0 };
                    assert!((v / norm - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn weighted_fit_recovers_homography() {
        let truth = Homography::from_row_slice(&[1.05, 0.02, 4.0, -0.03, 0.97, -6.0, 1e-4, -5e-5, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src: Vec<(f64, f64)> = (0..100)
            .map(|_| (rng.gen_range(0.0..256.0), rng.gen_range(0.0..256.0)))
            .collect();
        let dst = truth.apply_points(&src).unwrap();
        let weights: Vec<f64> = (0..100).map(|_| rng.gen_range(0.1..1.0)).collect();
        let fit = fit_homography(&src, &dst, Some(&weights)).unwrap();
        for (a, b) in fit.to_row_array().iter().zip(truth.to_row_array().iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut motion = FourPointMotion::zero();
        for c in motion.corners.iter_mut() {
            *c = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
        }
        let (h, jac) = four_point_jacobian(&motion, 64, 48).unwrap();
        let dlt = four_point_to_homography(&motion, 64, 48).unwrap();
        for (a, b) in h.to_row_array().iter().zip(dlt.to_row_array().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        let base = motion.to_flat();
        let step = 1e-5;
        for k in 0..8 {
            let mut p = base;
            p[k] += step;
            let hp = four_point_jacobian(&FourPointMotion::from_flat(&p), 64, 48).unwrap().0;
            p[k] -= 2.0 * step;
            let hm = four_point_jacobian(&FourPointMotion::from_flat(&p), 64, 48).unwrap().0;
            for e in 0..9 {
                let fd = (hp.to_row_array()[e] - hm.to_row_array()[e]) / (2.0 * step);
                assert!(
                    (fd - jac[k][e]).abs() < 1e-7 * (1.0 + fd.abs()),
                    "k={k} e={e}: {fd} vs {}",
                    jac[k][e]
                );
            }
        }
    }
}
