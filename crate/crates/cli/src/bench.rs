//! Field evaluation and warp timings per deformation model.

use std::time::Instant;

use edffd_core::synthetic::natural_image;
use edffd_core::warp::{
    compose_sampling_map, warp_image, ControlGrid, DeformationModel, DisplacementField, Homography,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alloc::peak_during;
use crate::CliError;

pub const HEADER: [&str; 8] = [
    "model",
    "width",
    "height",
    "grid_m",
    "grid_n",
    "field_eval_ms",
    "warp_ms",
    "peak_bytes",
];

pub struct BenchRow {
    pub model: DeformationModel,
    pub width: usize,
    pub height: usize,
    pub grid: (usize, usize),
    pub field_eval_ms: f64,
    pub warp_ms: f64,
    pub peak_bytes: usize,
}

/// Median wall time of `repeats` runs after one warm-up, in milliseconds.
fn median_ms<T>(repeats: usize, mut f: impl FnMut() -> T) -> (f64, T) {
    let mut last = f();
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        last = std::hint::black_box(f());
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    };
    (median, last)
}

pub fn run_case(
    model: DeformationModel,
    (width, height): (usize, usize),
    grid_size: (usize, usize),
    theta: f64,
    repeats: usize,
    seed: u64,
) -> Result<BenchRow, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid =
        ControlGrid::new(grid_size.0, grid_size.1, width, height).map_err(|e| CliError::Usage(e.to_string()))?;
    for d in grid.displacements_mut() {
        *d = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
    }
    let src = natural_image(width, height, seed);
    let eval = || model.field(&grid, theta);
    let warp = |field: &DisplacementField| {
        let map = compose_sampling_map(&Homography::identity(), &[field], width, height)?;
        Ok::<_, edffd_core::Error>(warp_image(&src, &map))
    };
    let internal = |e: edffd_core::Error| CliError::Usage(e.to_string());
    let (field_eval_ms, field) = median_ms(repeats, eval);
    let field = field.map_err(internal)?;
    let (warp_ms, warped) = median_ms(repeats, || warp(&field));
    warped.map_err(internal)?;
    let (once, peak_bytes) = peak_during(|| eval().and_then(|f| warp(&f)));
    once.map_err(internal)?;
    Ok(BenchRow {
        model,
        width,
        height,
        grid: grid_size,
        field_eval_ms,
        warp_ms,
        peak_bytes,
    })
}

pub fn to_csv(rows: &[BenchRow]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(HEADER).map_err(err)?;
    for r in rows {
        w.write_record([
            r.model.name().to_string(),
            r.width.to_string(),
            r.height.to_string(),
            r.grid.0.to_string(),
            r.grid.1.to_string(),
            format!("{:.4}", r.field_eval_ms),
            format!("{:.4}", r.warp_ms),
            r.peak_bytes.to_string(),
        ])
        .map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}
