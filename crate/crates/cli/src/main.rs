mod alloc;
mod bench;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edffd_core::image::{psnr_masked, ImageBuffer};
use edffd_core::params::WarpParams;
use edffd_core::pipeline::{register, RegistrationConfig, RegistrationResult};
use edffd_core::selfcheck::{self, SelfcheckOptions};
use edffd_core::warp::DeformationModel;
use edffd_core::Error;
use serde::Serialize;

use output::{Payload, Staged};

#[global_allocator]
static ALLOC: alloc::Counting = alloc::Counting;

#[derive(Debug)]
pub enum CliError {
    Io(String),
    Registration(String),
    Schema(String),
    Usage(String),
    SelfcheckFailed,
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::SelfcheckFailed => 1,
            CliError::Io(_) | CliError::Usage(_) => 2,
            CliError::Registration(_) => 3,
            CliError::Schema(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Registration(m) => write!(f, "registration failed: {m}"),
            CliError::Schema(m) => write!(f, "schema error: {m}"),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::SelfcheckFailed => write!(f, "self-check failed"),
        }
    }
}

/// Loading errors: unreadable files are I/O, malformed parameters are schema.
fn load_error(e: Error) -> CliError {
    match e {
        Error::Schema { .. } => CliError::Schema(e.to_string()),
        other => CliError::Io(other.to_string()),
    }
}

#[derive(Parser)]
#[command(
    name = "edffd",
    version,
    about = "Exponential-decay free-form deformation registration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a target image onto a reference image.
    Register(RegisterArgs),
    /// Apply stored warp parameters to an image.
    Warp {
        src: PathBuf,
        params: PathBuf,
        out: PathBuf,
    },
    /// Time field evaluation and warping per deformation model.
    Bench(BenchArgs),
    /// Run the built-in property and registration suites.
    Selfcheck(SelfcheckArgs),
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (m, n) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected MxN, got '{s}'"))?;
    let m: usize = m.trim().parse().map_err(|_| format!("bad row count in '{s}'"))?;
    let n: usize = n.trim().parse().map_err(|_| format!("bad column count in '{s}'"))?;
    if m == 0 || n == 0 {
        return Err(format!("grid '{s}' must be positive"));
    }
    Ok((m, n))
}

fn parse_model(s: &str) -> Result<DeformationModel, String> {
    s.parse()
        .map_err(|_| format!("unknown model '{s}' (expected edffd, bspline or tps)"))
}

#[derive(Args)]
struct RegisterArgs {
    reference: PathBuf,
    target: PathBuf,
    #[arg(long, value_parser = parse_model, default_value = "edffd")]
    model: DeformationModel,
    /// Grid per refinement stage, e.g. `12x12` or `12x12,18x18`.
    #[arg(long, value_parser = parse_grid, value_delimiter = ',')]
    grid: Vec<(usize, usize)>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2), default_value_t = 1)]
    stages: u8,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    radius: Option<usize>,
    /// Accepted for symmetry with `bench`; registration draws no random numbers.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Also write the per-iteration loss trace as `trace.csv`.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Canvas sizes, `512` or `640x480`.
    #[arg(long, value_delimiter = ',', default_value = "256,512")]
    sizes: Vec<String>,
    #[arg(long, value_parser = parse_grid, value_delimiter = ',', default_value = "12x12,24x24")]
    grids: Vec<(usize, usize)>,
    #[arg(long, value_parser = parse_model, value_delimiter = ',', default_value = "tps,bspline,edffd")]
    models: Vec<DeformationModel>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0.75)]
    theta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Write the synthetic fixtures into this directory.
    #[arg(long)]
    emit: Option<PathBuf>,
    /// Registration pairs to run.
    #[arg(long, default_value_t = 3)]
    pairs: usize,
    #[arg(long, hide = true)]
    corrupt_basis: bool,
}

#[derive(Serialize)]
struct Metrics {
    psnr_db: serde_json::Value,
    inference_ms: f64,
    warp_ms: f64,
    total_ms: f64,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("EDFFD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        CliError::Schema(format!(
            "invalid parameter 'EDFFD_THREADS': expected a count, got '{raw}'"
        ))
    })?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn config_from(args: &RegisterArgs) -> Result<RegistrationConfig, CliError> {
    let mut cfg = RegistrationConfig {
        model: args.model,
        n_stages: args.stages as usize,
        ..RegistrationConfig::default()
    };
    for (i, g) in args.grid.iter().enumerate() {
        match cfg.stage_grids.get_mut(i) {
            Some(slot) => *slot = *g,
            None => cfg.stage_grids.push(*g),
        }
    }
    if let Some(t) = args.theta {
        cfg.theta = t;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(r) = args.radius {
        cfg.radius = r;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Red from the warped target, green and blue from the reference.
fn composite(warped: &ImageBuffer, reference: &ImageBuffer) -> ImageBuffer {
    let (w, h) = (reference.width(), reference.height());
    let channel = |img: &ImageBuffer, x: usize, y: usize, c: usize| img.get(x, y, c.min(img.channels() - 1));
    let data = (0..w * h)
        .flat_map(|i| {
            let (x, y) = (i % w, i / w);
            [
                channel(warped, x, y, 0),
                channel(reference, x, y, 1),
                channel(reference, x, y, 2),
            ]
        })
        .collect();
    ImageBuffer::new(w, h, 3, data).expect("channels copied from valid images")
}

fn trace_csv(result: &RegistrationResult) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(["stage", "level", "iteration", "loss", "step"])
        .map_err(err)?;
    for t in &result.traces {
        for (i, v) in t.values.iter().enumerate() {
            let step = if i == 0 {
                String::new()
            } else {
                format!("{}", t.steps[i - 1])
            };
            w.write_record([
                t.stage.to_string(),
                t.level.to_string(),
                i.to_string(),
                format!("{v}"),
                step,
            ])
            .map_err(err)?;
        }
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

fn cmd_register(args: RegisterArgs) -> Result<(), CliError> {
    let cfg = config_from(&args)?;
    let ir = ImageBuffer::load(&args.reference).map_err(load_error)?;
    let it = ImageBuffer::load(&args.target).map_err(load_error)?;
    let result = register(&ir, &it, &cfg).map_err(|e| CliError::Registration(e.to_string()))?;
    let psnr = psnr_masked(&ir, &result.warped, &result.overlap)
        .map_err(|e| CliError::Registration(format!("metrics: {e}")))?;
    let metrics = Metrics {
        psnr_db: if psnr.is_infinite() { "inf".into() } else { psnr.into() },
        inference_ms: result.timings.inference_ms,
        warp_ms: result.timings.warp_ms,
        total_ms: result.timings.total_ms,
    };
    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::Io(format!("{}: {e}", args.out_dir.display())))?;
    let dir = &args.out_dir;
    let mut staged = Staged::default();
    staged.add(dir.join("warped.png"), Payload::Image(result.warped.clone()))?;
    staged.add(dir.join("overlap.png"), Payload::Image(result.overlap.to_image()))?;
    staged.add(
        dir.join("composite.png"),
        Payload::Image(composite(&result.warped, &ir)),
    )?;
    staged.add(
        dir.join("params.json"),
        Payload::Bytes(result.params.to_json_string().into_bytes()),
    )?;
    let mut json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    json.push('\n');
    staged.add(dir.join("metrics.json"), Payload::Bytes(json.into_bytes()))?;
    if args.trace {
        staged.add(dir.join("trace.csv"), Payload::Bytes(trace_csv(&result)?))?;
    }
    staged.commit()?;
    println!(
        "psnr {} dB, inference {:.1} ms, warp {:.1} ms -> {}",
        if psnr.is_infinite() {
            "inf".to_string()
        } else {
            format!("{psnr:.2}")
        },
        result.timings.inference_ms,
        result.timings.warp_ms,
        dir.display()
    );
    Ok(())
}

fn cmd_warp(src: PathBuf, params: PathBuf, out: PathBuf) -> Result<(), CliError> {
    let img = ImageBuffer::load(&src).map_err(load_error)?;
    let p = WarpParams::load(&params).map_err(load_error)?;
    if p.canvas != (img.width(), img.height()) {
        return Err(CliError::Schema(format!(
            "invalid parameter 'canvas': {}x{} does not match the {}x{} source image",
            p.canvas.0,
            p.canvas.1,
            img.width(),
            img.height()
        )));
    }
    let (warped, _) = p.apply(&img).map_err(|e| CliError::Schema(e.to_string()))?;
    let mut staged = Staged::default();
    staged.add(&out, Payload::Image(warped))?;
    staged.commit()
}

fn parse_size(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("invalid size '{s}'"));
    let (w, h) = match s.split_once(['x', 'X']) {
        Some((w, h)) => (
            w.trim().parse().map_err(|_| bad())?,
            h.trim().parse().map_err(|_| bad())?,
        ),
        None => {
            let n = s.trim().parse().map_err(|_| bad())?;
            (n, n)
        }
    };
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let sizes = args
        .sizes
        .iter()
        .map(|s| parse_size(s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for &model in &args.models {
        for &size in &sizes {
            for &grid in &args.grids {
                rows.push(bench::run_case(model, size, grid, args.theta, args.repeats, args.seed)?);
            }
        }
    }
    let csv = bench::to_csv(&rows)?;
    match args.out {
        Some(path) => {
            let mut staged = Staged::default();
            staged.add(path, Payload::Bytes(csv))?;
            staged.commit()
        }
        None => {
            print!("{}", String::from_utf8_lossy(&csv));
            Ok(())
        }
    }
}

fn cmd_selfcheck(args: SelfcheckArgs) -> Result<(), CliError> {
    let results = selfcheck::run(&SelfcheckOptions {
        pairs: args.pairs,
        emit: args.emit,
        corrupt_basis: args.corrupt_basis,
    });
    print!("{}", selfcheck::format_table(&results));
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(CliError::SelfcheckFailed)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|()| match cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Warp { src, params, out } => cmd_warp(src, params, out),
        Command::Bench(a) => cmd_bench(a),
        Command::Selfcheck(a) => cmd_selfcheck(a),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("edffd: {e}");
            ExitCode::from(e.code())
        }
    }
}
