use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::ffd::DisplacementField;
use crate::error::{Error, Result};

#[inline]
fn radial(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        // r^2 log r
        0.5 * r2 * r2.ln()
    }
}

/// Fitted interpolating thin-plate spline over normalized coordinates.
#[derive(Debug, Clone)]
pub struct ThinPlateSpline {
    centers: Vec<(f64, f64)>,
    /// Per-axis radial weights followed by the affine coefficients `a0, ax, ay`.
    coef_x: Vec<f64>,
    coef_y: Vec<f64>,
    scale: f64,
}

impl ThinPlateSpline {
    /// Fits displacements `targets - anchors`.
    pub fn fit(anchors: &[(f64, f64)], targets: &[(f64, f64)], scale: f64) -> Result<Self> {
        let n = anchors.len();
        if targets.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{n} anchors vs {} targets",
                targets.len()
            )));
        }
        if n < 3 || all_collinear(anchors) {
            return Err(Error::SingularSystem);
        }
        let centers: Vec<(f64, f64)> = anchors.iter().map(|p| (p.0 / scale, p.1 / scale)).collect();
        let size = n + 3;
        let mut a = DMatrix::<f64>::zeros(size, size);
        for i in 0..n {
            for j in 0..n {
                let (dx, dy) = (centers[i].0 - centers[j].0, centers[i].1 - centers[j].1);
                a[(i, j)] = radial(dx * dx + dy * dy);
            }
            let row = [1.0, centers[i].0, centers[i].1];
            for (k, v) in row.iter().enumerate() {
                a[(i, n + k)] = *v;
                a[(n + k, i)] = *v;
            }
        }
        let mut bx = DVector::<f64>::zeros(size);
        let mut by = DVector::<f64>::zeros(size);
        for i in 0..n {
            bx[i] = targets[i].0 - anchors[i].0;
            by[i] = targets[i].1 - anchors[i].1;
        }
        let lu = a.clone().lu();
        let cx = lu.solve(&bx).ok_or(Error::SingularSystem)?;
        let cy = lu.solve(&by).ok_or(Error::SingularSystem)?;
        // An LU of a near-singular matrix may still "succeed"; check the residual.
        let tol = 1e-8 * (1.0 + bx.amax().max(by.amax()));
        if (&a * &cx - &bx).amax() > tol || (&a * &cy - &by).amax() > tol {
            return Err(Error::SingularSystem);
        }
        Ok(Self {
            centers,
            coef_x: cx.iter().copied().collect(),
            coef_y: cy.iter().copied().collect(),
            scale,
        })
    }

    #[inline]
    pub fn displacement(&self, x: f64, y: f64) -> [f64; 2] {
        let (x, y) = (x / self.scale, y / self.scale);
        let n = self.centers.len();
        let mut ax = self.coef_x[n] + self.coef_x[n + 1] * x + self.coef_x[n + 2] * y;
        let mut ay = self.coef_y[n] + self.coef_y[n + 1] * x + self.coef_y[n + 2] * y;
        for (k, c) in self.centers.iter().enumerate() {
            let (dx, dy) = (x - c.0, y - c.1);
            let u = radial(dx * dx + dy * dy);
            ax += self.coef_x[k] * u;
            ay += self.coef_y[k] * u;
        }
        [ax, ay]
    }

    pub fn field(&self, width: usize, height: usize) -> DisplacementField {
        let mut dx = vec![0.0; width * height];
        let mut dy = vec![0.0; width * height];
        dx.par_chunks_mut(width)
            .zip(dy.par_chunks_mut(width))
            .enumerate()
            .for_each(|(y, (rx, ry))| {
                for x in 0..width {
                    let d = self.displacement(x as f64, y as f64);
                    rx[x] = d[0];
                    ry[x] = d[1];
                }
            });
        DisplacementField::from_planes(width, height, dx, dy)
    }
}

fn all_collinear(pts: &[(f64, f64)]) -> bool {
    let a = pts[0];
    let scale = pts
        .iter()
        .flat_map(|p| [(p.0 - a.0).abs(), (p.1 - a.1).abs()])
        .fold(0.0f64, f64::max);
    if scale == 0.0 {
        return true;
    }
    let Some(b) = pts
        .iter()
        .copied()
        .find(|p| (p.0 - a.0).abs().max((p.1 - a.1).abs()) > 1e-9 * scale)
    else {
        return true;
    };
    pts.iter().all(|c| {
        let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
        cross.abs() <= 1e-9 * scale * scale
    })
}

/// Interpolating thin-plate spline displacement field mapping every anchor onto its target.
pub fn tps_field(
    anchors: &[(f64, f64)],
    targets: &[(f64, f64)],
    width: usize,
    height: usize,
) -> Result<DisplacementField> {
    let scale = width.max(height).max(1) as f64;
    Ok(ThinPlateSpline::fit(anchors, targets, scale)?.field(width, height))
}
