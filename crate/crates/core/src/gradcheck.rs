//! Finite-difference verification of the full-pipeline gradients.
//!
//! Builds a small random registration instance, computes reverse-mode
//! gradients for every mean and log-variance entry, and compares each with a
//! central difference of the recorded loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::field::{gaussian_smooth, GridShape, ScalarField, VectorField};
use crate::io::synth::synth_pair;
use crate::objective::VelocityPosterior;
use crate::optimizer::{backward_ddr, forward_ddr, DdrProblem, NoiseSet, PosteriorSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Voxels per axis of the square 2D instance.
    pub size: usize,
    pub seed: u64,
    /// Initial central-difference step. The loss is only piecewise smooth
    /// (linear interpolation), so a step is accepted once the differences at
    /// `h` and `h / 2` agree; otherwise it is divided by 10, at most twice.
    pub step: f64,
    /// Entries with `max(|analytic|, |numeric|)` below this use it as the
    /// denominator of the relative error.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            size: 12,
            seed: 1,
            step: 1e-5,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Entries whose step had to be reduced.
    pub refined: usize,
    /// `(buffer, index)` of the worst relative error; buffers follow
    /// [`PosteriorSet::slices`].
    pub worst: (usize, usize),
}

/// Relative error with a small absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn random_posterior(shape: GridShape, amplitude: f64, rng: &mut impl Rng) -> VelocityPosterior {
    let comps: Vec<ScalarField> = (0..shape.ndim())
        .map(|_| {
            let noise = ScalarField::from_fn(shape, |_| rng.random_range(-1.0..1.0));
            gaussian_smooth(&noise, 1.5)
        })
        .collect();
    let mu = VectorField::from_components(&comps).expect("matching components");
    let peak = mu.max_abs().max(1e-12);
    let mu = mu.scaled(amplitude / peak);
    let n = shape.len() * shape.ndim();
    let lv: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..-1.0)).collect();
    VelocityPosterior::new(mu, VectorField::new(shape, lv).expect("finite")).expect("same shape")
}

/// Random instance: a synthetic pair plus random posteriors and noise, with
/// every branch and the KL term weighted so each gradient path matters.
pub fn random_instance(cfg: &GradcheckConfig) -> Result<(DdrProblem, PosteriorSet, NoiseSet)> {
    let shape = GridShape::new2(cfg.size, cfg.size)?;
    let pair = synth_pair(cfg.seed, shape, 3.0, 1.5)?;
    let mut run = RunConfig::default();
    run.pyramid.overlap = (cfg.size / 2).saturating_sub(4).min(2);
    run.objective.kl_weight = 0.01;
    run.objective.prior_precision = 2.0;
    run.objective.image_noise_var = 0.001;
    let problem = DdrProblem::new(&pair.source, &pair.target, &run)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let init = problem.initial_params();
    let global = random_posterior(init.global.shape(), 1.2, &mut rng);
    let chunks = init
        .chunks
        .iter()
        .map(|p| random_posterior(p.shape(), 1.6, &mut rng))
        .collect();
    let params = PosteriorSet::new(global, chunks);
    let noise = NoiseSet::draw(&params, &mut rng);
    Ok((problem, params, noise))
}

fn loss_at(problem: &DdrProblem, params: &PosteriorSet, noise: &NoiseSet) -> Result<f64> {
    Ok(forward_ddr(problem, params, noise)?.loss.total)
}

fn perturbed(params: &PosteriorSet, buffer: usize, index: usize, delta: f64) -> PosteriorSet {
    let mut p = params.clone();
    p.update_with(|i, s| {
        if i == buffer {
            s[index] += delta
        }
    });
    p
}

/// Compares every analytic gradient entry with a central difference.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.size < 8 || !cfg.size.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "gradcheck size must be even and >= 8, got {}",
            cfg.size
        )));
    }
    let (problem, params, noise) = random_instance(cfg)?;
    let mut fwd = forward_ddr(&problem, &params, &noise)?;
    let grads = backward_ddr(&mut fwd.tape, &params)?;
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();

    let base = fwd.loss.total;
    let mut report = GradcheckReport {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        refined: 0,
        worst: (0, 0),
    };
    for (b, buf) in analytic.iter().enumerate() {
        for (j, &a) in buf.iter().enumerate() {
            let central = |h: f64| -> Result<f64> {
                let up = loss_at(&problem, &perturbed(&params, b, j, h), &noise)?;
                let down = loss_at(&problem, &perturbed(&params, b, j, -h), &noise)?;
                Ok((up - down) / (2.0 * h))
            };
            let mut h = cfg.step;
            let mut tries = 0;
            let numeric = loop {
                let (coarse, fine) = (central(h)?, central(h / 2.0)?);
                let noise_floor = 8.0 * f64::EPSILON * base.abs() / h;
                let settled =
                    (coarse - fine).abs() <= (1e-6 * coarse.abs().max(fine.abs())).max(noise_floor);
                if settled || tries == 2 {
                    break fine;
                }
                tries += 1;
                h /= 10.0;
            };
            if tries > 0 {
                report.refined += 1;
            }
            let rel = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (b, j);
            }
        }
    }
    Ok(report)
}
