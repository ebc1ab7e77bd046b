//! Shared fixtures for the deformation benchmarks.

use edffd_core::warp::{ControlGrid, DeformationModel};

pub const MODELS: [DeformationModel; 3] = [
    DeformationModel::Tps,
    DeformationModel::Bspline,
    DeformationModel::Edffd,
];
pub const SIZES: [usize; 2] = [256, 512];
pub const GRIDS: [(usize, usize); 2] = [(12, 12), (24, 24)];
pub const THETA: f64 = 0.75;

/// Grid with reproducible displacements in `[-amplitude, amplitude]`.
pub fn perturbed_grid(rows: usize, cols: usize, width: usize, height: usize, amplitude: f64) -> ControlGrid {
    let mut grid = ControlGrid::new(rows, cols, width, height).expect("positive grid and canvas");
    for (i, d) in grid.displacements_mut().iter_mut().enumerate() {
        let t = i as f64;
        *d = [amplitude * (1.7 * t).sin(), amplitude * (2.3 * t + 0.5).cos()];
    }
    grid
}
