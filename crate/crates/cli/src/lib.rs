//! Command-line driver: registration, warping, evaluation, fixtures and the
//! gradient self-check.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ddr_core::config::RunConfig;
use ddr_core::field::{
    jacobian_determinant_map, warp_image, warp_labels, Deformation, GridShape, ScalarField,
};
use ddr_core::gradcheck::{run_gradcheck, GradcheckConfig};
use ddr_core::io::ddrf::{read_field, write_field, Field};
use ddr_core::io::pgm::{read_pgm, write_pgm};
use ddr_core::io::render::{render_slice, Normalization};
use ddr_core::io::report::Report;
use ddr_core::io::synth::{synth_pair_with, SynthSpec};
use ddr_core::metrics::{dice, evaluate_deformation, unique_labels};
use ddr_core::optimizer::{register_pair, StopReason};
use ddr_core::{Error, Result};

/// Gradient-check pass threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "ddr",
    version,
    about = "Multi-scale diffeomorphic image registration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Register a source image onto a target image.
    Register(RegisterArgs),
    /// Apply a stored deformation to an image or label map.
    Warp(WarpArgs),
    /// RMSE before/after and folding statistics of a stored deformation.
    Metrics(MetricsArgs),
    /// Dice overlap of two label maps, optionally after warping one of them.
    Dice(DiceArgs),
    /// Write a seeded synthetic image pair with its ground-truth velocity.
    Synth(SynthArgs),
    /// Finite-difference check of the full-pipeline gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct RegisterArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// `key = value` configuration file; absent keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Label map of the source, warped and scored against `--target-labels`.
    #[arg(long, requires = "target_labels")]
    source_labels: Option<PathBuf>,
    #[arg(long, requires = "source_labels")]
    target_labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WarpArgs {
    #[arg(long)]
    image: PathBuf,
    /// Displacement field (`.ddrf` vector field) of the deformation.
    #[arg(long)]
    phi: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Treat the image as integer labels (nearest-label resampling).
    #[arg(long)]
    labels: bool,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    phi: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiceArgs {
    /// Label map compared against `--target`.
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Warp the source labels by this deformation first.
    #[arg(long)]
    phi: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid size: `N` (square 2D), `NxM` or `NxMxK`.
    #[arg(long, default_value = "64")]
    size: String,
    /// Smoothing width of the random velocity, in voxels.
    #[arg(long, default_value_t = 8.0)]
    sigma: f64,
    /// Maximum velocity magnitude, in voxels.
    #[arg(long, default_value_t = 3.0)]
    amplitude: f64,
    /// Relative strength of fine-scale texture in the source image.
    #[arg(long, default_value_t = 0.0)]
    texture: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 12)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Runs the CLI on `argv` (including the program name) and returns the
/// process exit code: 0 on success, 1 on runtime errors, 2 on usage errors.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(cli.command, &mut stdout) {
        Ok(code) => code,
        Err(Error::Format(f)) => {
            eprintln!("error: {f} (code {})", f.code());
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(command: Command, out: &mut impl Write) -> Result<i32> {
    match command {
        Command::Register(a) => register(&a, out),
        Command::Warp(a) => warp(&a),
        Command::Metrics(a) => metrics(&a, out),
        Command::Dice(a) => dice_cmd(&a, out),
        Command::Synth(a) => synth(&a),
        Command::Gradcheck(a) => gradcheck(&a, out),
    }
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

/// Reads a scalar image from `.pgm` or `.ddrf`, chosen by extension.
pub fn read_image(path: &Path) -> Result<ScalarField> {
    if is_pgm(path) {
        read_pgm(path)
    } else {
        read_field(path)?.into_scalar()
    }
}

/// Writes a scalar image as `.pgm` (8-bit, clamped to [0, 1]) or `.ddrf`.
pub fn write_image(field: &ScalarField, path: &Path) -> Result<()> {
    if is_pgm(path) {
        write_pgm(field, path)
    } else {
        write_field(&Field::Scalar(field.clone()), path)
    }
}

fn read_labels(path: &Path) -> Result<ScalarField> {
    if is_pgm(path) {
        return Err(Error::InvalidField(format!(
            "{}: label maps must be stored as .ddrf",
            path.display()
        )));
    }
    read_field(path)?.into_scalar()
}

fn read_deformation(path: &Path) -> Result<Deformation> {
    Ok(Deformation::from_displacement(
        read_field(path)?.into_vector()?,
    ))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Middle slice along the last axis: the whole image in 2D.
fn render_index(shape: GridShape) -> usize {
    if shape.ndim() == 2 {
        0
    } else {
        shape.extent(2) / 2
    }
}

fn register(a: &RegisterArgs, out: &mut impl Write) -> Result<i32> {
    let source = read_image(&a.source)?;
    let target = read_image(&a.target)?;
    Error::check_shape(source.shape(), target.shape())?;
    let labels = match (&a.source_labels, &a.target_labels) {
        (Some(s), Some(t)) => Some((read_labels(s)?, read_labels(t)?)),
        _ => None,
    };
    let config = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };

    let result = register_pair(&source, &target, &config)?;
    let eval = evaluate_deformation(
        &source,
        &target,
        labels.as_ref().map(|(s, t)| (s, t)),
        &result.phi_full,
    )?;
    let warped = warp_image(&source, &result.phi_full)?;
    let det = jacobian_determinant_map(&result.phi_full)?;
    let difference = warped.difference(&target)?;

    let dir = &a.out_dir;
    create_dir(dir)?;
    write_field(
        &Field::Vector(result.fused_velocity.clone()),
        &dir.join("velocity.ddrf"),
    )?;
    write_field(
        &Field::Vector(result.phi_full.displacement().clone()),
        &dir.join("phi.ddrf"),
    )?;
    write_field(&Field::Scalar(warped.clone()), &dir.join("warped.ddrf"))?;
    let idx = render_index(source.shape());
    render_slice(
        &warped,
        2,
        idx,
        Normalization::MinMax,
        &dir.join("warped.pgm"),
    )?;
    render_slice(
        &difference,
        2,
        idx,
        Normalization::MinMax,
        &dir.join("difference.pgm"),
    )?;
    render_slice(
        &det,
        2,
        idx,
        Normalization::Diverging { center: 1.0 },
        &dir.join("jacobian.pgm"),
    )?;

    let mut report = Report::new();
    report.push("source", a.source.display());
    report.push("target", a.target.display());
    report.push("shape", source.shape());
    report.push("iterations", result.iterations);
    report.push(
        "stop_reason",
        match result.stop_reason {
            StopReason::MaxIterations => "max_iterations",
            StopReason::Patience => "patience",
        },
    );
    report.push("loss_initial", result.initial_loss());
    report.push("loss_final", result.final_loss());
    eval.write_into(&mut report);
    report.push_config(&config);
    report.write(&dir.join("report.txt"))?;

    writeln!(out, "rmse_before = {}", eval.rmse_before).map_err(|e| Error::io("stdout", e))?;
    writeln!(out, "rmse_after = {}", eval.rmse_after).map_err(|e| Error::io("stdout", e))?;
    writeln!(
        out,
        "folding_ratio_permille = {}",
        eval.folding.ratio_permille
    )
    .map_err(|e| Error::io("stdout", e))?;
    Ok(0)
}

fn warp(a: &WarpArgs) -> Result<i32> {
    let phi = read_deformation(&a.phi)?;
    let warped = if a.labels {
        warp_labels(&read_labels(&a.image)?, &phi)?
    } else {
        warp_image(&read_image(&a.image)?, &phi)?
    };
    if a.labels && is_pgm(&a.out) {
        return Err(Error::InvalidField(
            "warped labels must be written as .ddrf".into(),
        ));
    }
    write_image(&warped, &a.out)?;
    Ok(0)
}

fn emit(report: &Report, out: &mut impl Write) -> Result<()> {
    out.write_all(report.to_text().as_bytes())
        .map_err(|e| Error::io("stdout", e))
}

fn metrics(a: &MetricsArgs, out: &mut impl Write) -> Result<i32> {
    let source = read_image(&a.source)?;
    let target = read_image(&a.target)?;
    let phi = read_deformation(&a.phi)?;
    Error::check_shape(source.shape(), target.shape())?;
    Error::check_shape(source.shape(), phi.shape())?;
    let eval = evaluate_deformation(&source, &target, None, &phi)?;
    let mut report = Report::new();
    eval.write_into(&mut report);
    emit(&report, out)?;
    if let Some(p) = &a.out {
        report.write(p)?;
    }
    Ok(0)
}

fn dice_cmd(a: &DiceArgs, out: &mut impl Write) -> Result<i32> {
    let mut source = read_labels(&a.source)?;
    let target = read_labels(&a.target)?;
    Error::check_shape(source.shape(), target.shape())?;
    if let Some(p) = &a.phi {
        source = warp_labels(&source, &read_deformation(p)?)?;
    }
    let mut ids = unique_labels(&source)?;
    ids.extend(unique_labels(&target)?);
    ids.sort_unstable();
    ids.dedup();
    ids.retain(|&l| l != 0);
    let d = dice(&source, &target, &ids)?;
    let mut report = Report::new();
    for (l, s) in &d.scores {
        report.push(&format!("dice_label_{l}"), s);
    }
    if !d.absent.is_empty() {
        let absent: Vec<String> = d.absent.iter().map(|l| l.to_string()).collect();
        report.push("dice_absent_labels", absent.join(","));
    }
    match d.mean {
        Some(m) => report.push("dice_mean", m),
        None => report.push("dice_mean", "none"),
    }
    emit(&report, out)?;
    Ok(0)
}

fn parse_size(text: &str) -> Result<GridShape> {
    let dims: Vec<usize> = text
        .split('x')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidConfig(format!("invalid size {text:?}")))?;
    match dims.as_slice() {
        [n] => GridShape::new2(*n, *n),
        _ => GridShape::new(&dims),
    }
}

fn synth(a: &SynthArgs) -> Result<i32> {
    let mut spec = SynthSpec::new(a.seed, parse_size(&a.size)?, a.sigma, a.amplitude);
    spec.texture = a.texture;
    let pair = synth_pair_with(&spec)?;
    let dir = &a.out_dir;
    create_dir(dir)?;
    write_field(
        &Field::Scalar(pair.source.clone()),
        &dir.join("source.ddrf"),
    )?;
    write_field(
        &Field::Scalar(pair.target.clone()),
        &dir.join("target.ddrf"),
    )?;
    write_field(
        &Field::Vector(pair.v_true.clone()),
        &dir.join("v_true.ddrf"),
    )?;
    write_field(
        &Field::Vector(pair.phi_true.displacement().clone()),
        &dir.join("phi_true.ddrf"),
    )?;
    if pair.source.shape().ndim() == 2 {
        write_pgm(&pair.source, &dir.join("source.pgm"))?;
        write_pgm(&pair.target, &dir.join("target.pgm"))?;
    }
    Ok(0)
}

fn gradcheck(a: &GradcheckArgs, out: &mut impl Write) -> Result<i32> {
    let cfg = GradcheckConfig {
        size: a.size,
        seed: a.seed,
        ..GradcheckConfig::default()
    };
    let r = run_gradcheck(&cfg)?;
    let pass = r.max_rel_error < GRADCHECK_TOLERANCE;
    writeln!(
        out,
        "checked = {}\nmax_rel_error = {:e}\nmax_abs_error = {:e}\nstatus = {}",
        r.checked,
        r.max_rel_error,
        r.max_abs_error,
        if pass { "pass" } else { "fail" }
    )
    .map_err(|e| Error::io("stdout", e))?;
    Ok(if pass { 0 } else { 1 })
}
