use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::ffd::{bspline_ffd_field, edffd_field, edffd_weight_matrix, ControlGrid, DisplacementField};
use super::tps::tps_field;
use crate::basis::bspline_basis_product;
use crate::error::{Error, Result};

/// How control displacements turn into a dense field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeformationModel {
    #[default]
    Edffd,
    Bspline,
    Tps,
}

impl DeformationModel {
    pub fn name(self) -> &'static str {
        match self {
            DeformationModel::Edffd => "edffd",
            DeformationModel::Bspline => "bspline",
            DeformationModel::Tps => "tps",
        }
    }

    /// Dense displacement field of `grid`. `theta` only affects the exponential kernel.
    pub fn field(self, grid: &ControlGrid, theta: f64) -> Result<DisplacementField> {
        match self {
            DeformationModel::Edffd => edffd_field(grid, theta),
            DeformationModel::Bspline => Ok(bspline_ffd_field(grid)),
            DeformationModel::Tps => {
                let anchors = grid.anchors();
                let (_, cols) = grid.cells();
                let targets: Vec<(f64, f64)> = (0..anchors.len())
                    .map(|i| grid.deformed(i / (cols + 1), i % (cols + 1)))
                    .collect();
                let (w, h) = grid.canvas();
                tps_field(&anchors, &targets, w, h)
            }
        }
    }

    /// Weight of every control point at each of `points`, row-major
    /// `points x controls`, so that the field at a point is the weighted sum
    /// of control displacements.
    pub fn weight_matrix(self, grid: &ControlGrid, theta: f64, points: &[(f64, f64)]) -> Result<Vec<f64>> {
        match self {
            DeformationModel::Edffd => edffd_weight_matrix(grid, theta, points),
            DeformationModel::Bspline => {
                let (sx, sy) = grid.spacing();
                let anchors = grid.anchors();
                let c = anchors.len();
                let mut out = vec![0.0; points.len() * c];
                out.par_chunks_mut(c).zip(points.par_iter()).for_each(|(row, &(x, y))| {
                    for (k, a) in anchors.iter().enumerate() {
                        row[k] = bspline_basis_product((x - a.0) / sx, (y - a.1) / sy);
                    }
                });
                Ok(out)
            }
            DeformationModel::Tps => tps_weight_matrix(grid, points),
        }
    }
}

impl fmt::Display for DeformationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DeformationModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edffd" => Ok(DeformationModel::Edffd),
            "bspline" => Ok(DeformationModel::Bspline),
            "tps" => Ok(DeformationModel::Tps),
            other => Err(Error::InvalidArgument(format!("unknown deformation model '{other}'"))),
        }
    }
}

/// Cardinal thin-plate weights: the interpolant of a unit displacement at
/// each anchor, evaluated at `points`. Matches [`tps_field`] normalization.
fn tps_weight_matrix(grid: &ControlGrid, points: &[(f64, f64)]) -> Result<Vec<f64>> {
    let (w, h) = grid.canvas();
    let scale = w.max(h).max(1) as f64;
    let centers: Vec<(f64, f64)> = grid.anchors().iter().map(|a| (a.0 / scale, a.1 / scale)).collect();
    let n = centers.len();
    let radial = |r2: f64| if r2 <= 0.0 { 0.0 } else { 0.5 * r2 * r2.ln() };
    let mut a = DMatrix::<f64>::zeros(n + 3, n + 3);
    for i in 0..n {
        for j in 0..n {
            let (dx, dy) = (centers[i].0 - centers[j].0, centers[i].1 - centers[j].1);
            a[(i, j)] = radial(dx * dx + dy * dy);
        }
        for (k, v) in [1.0, centers[i].0, centers[i].1].into_iter().enumerate() {
            a[(i, n + k)] = v;
            a[(n + k, i)] = v;
        }
    }
    let inv = a.try_inverse().ok_or(Error::SingularSystem)?;
    let mut out = vec![0.0; points.len() * n];
    out.par_chunks_mut(n).zip(points.par_iter()).for_each(|(row, &(x, y))| {
        let (x, y) = (x / scale, y / scale);
        let basis: Vec<f64> = centers
            .iter()
            .map(|c| radial((x - c.0).powi(2) + (y - c.1).powi(2)))
            .chain([1.0, x, y])
            .collect();
        for (k, r) in row.iter_mut().enumerate() {
            *r = basis.iter().enumerate().map(|(j, b)| b * inv[(j, k)]).sum();
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weight_matrices_reproduce_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = (0..25)
            .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
            .collect();
        let grid = ControlGrid::with_displacements(4, 4, 32, 28, d).unwrap();
        let pts: Vec<(f64, f64)> = (0..40).map(|i| ((i * 7 % 32) as f64, (i * 5 % 28) as f64)).collect();
        for model in [
            DeformationModel::Edffd,
            DeformationModel::Bspline,
            DeformationModel::Tps,
        ] {
            let field = model.field(&grid, 0.75).unwrap();
            let wm = model.weight_matrix(&grid, 0.75, &pts).unwrap();
            for (i, &(x, y)) in pts.iter().enumerate() {
                let row = &wm[i * 25..(i + 1) * 25];
                let dx: f64 = row.iter().zip(grid.displacements()).map(|(w, d)| w * d[0]).sum();
                let dy: f64 = row.iter().zip(grid.displacements()).map(|(w, d)| w * d[1]).sum();
                let f = field.at(x as usize, y as usize);
                assert!((dx - f[0]).abs() < 1e-8 && (dy - f[1]).abs() < 1e-8, "{model}");
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for model in [
            DeformationModel::Edffd,
            DeformationModel::Bspline,
            DeformationModel::Tps,
        ] {
            assert_eq!(model.name().parse::<DeformationModel>().unwrap(), model);
        }
        assert!("affine".parse::<DeformationModel>().is_err());
    }
}
