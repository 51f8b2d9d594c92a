//! Per-pair variational registration.
//!
//! The velocity posteriors of the downsampled branch and of every chunk are
//! free parameters fitted directly with Adam on the three-level objective.
//! Each iteration draws one noise sample per posterior, evaluates the full
//! graph (downsampled, chunk and fused full-resolution branches) while
//! recording a [`Tape`], and sweeps the tape backwards for exact gradients.

mod adam;
mod tape;

pub use adam::{adam_step, AdamState};
pub use tape::{Branch, PosteriorRef, Tape};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::field::{
    downsample, upsample, warp_values, Deformation, GridShape, ScalarField, VectorField,
};
use crate::integrate::exponentiate_traced;
use crate::objective::{kl_loss, mse_loss, sample_velocity, LossBreakdown, VelocityPosterior};
use crate::pyramid::{make_chunk_layout, merge_chunks, split_chunks, ChunkLayout};

/// Initial log-variance of every posterior (sigma ~ 0.007 voxel).
pub const INITIAL_LOG_VAR: f64 = -10.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    /// Iterations without sufficient relative improvement before stopping.
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_iters: 300,
            patience: 30,
            min_rel_improvement: 1e-4,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must be in (0, 1), got {b}"));
            }
        }
        if self.max_iters < 1 {
            return bad("max_iters must be >= 1".into());
        }
        if !(self.min_rel_improvement.is_finite() && self.min_rel_improvement >= 0.0) {
            return bad(format!(
                "min_rel_improvement must be >= 0, got {}",
                self.min_rel_improvement
            ));
        }
        Ok(())
    }
}

/// All optimized parameters: the global (half-resolution) posterior and one
/// posterior per chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSet {
    pub global: VelocityPosterior,
    pub chunks: Vec<VelocityPosterior>,
    version: u64,
}

impl PosteriorSet {
    pub fn new(global: VelocityPosterior, chunks: Vec<VelocityPosterior>) -> Self {
        Self {
            global,
            chunks,
            version: 0,
        }
    }

    /// Zero means and constant log-variance, shaped for `layout`.
    pub fn initial(layout: &ChunkLayout, log_var: f64) -> Self {
        let coarse = coarse_shape(layout.full_shape());
        Self::new(
            VelocityPosterior::constant(coarse, log_var),
            (0..layout.len())
                .map(|_| VelocityPosterior::constant(layout.chunk_shape(), log_var))
                .collect(),
        )
    }

    /// Incremented by every optimizer update; tapes record it.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn get(&self, r: PosteriorRef) -> &VelocityPosterior {
        match r {
            PosteriorRef::Global => &self.global,
            PosteriorRef::Chunk(i) => &self.chunks[i],
        }
    }

    /// Parameter buffers in a fixed order: global mu, global log_var, then
    /// mu and log_var of each chunk.
    pub fn slices(&self) -> Vec<&[f64]> {
        std::iter::once(&self.global)
            .chain(&self.chunks)
            .flat_map(|p| [p.mu().data(), p.log_var().data()])
            .collect()
    }

    pub(crate) fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        std::iter::once(&mut self.global)
            .chain(self.chunks.iter_mut())
            .flat_map(|p| p.params_mut())
            .collect()
    }

    /// Re-clamps log-variances and bumps the version after an in-place edit.
    pub(crate) fn finish_update(&mut self) {
        self.global.clamp();
        self.chunks.iter_mut().for_each(VelocityPosterior::clamp);
        self.version += 1;
    }

    /// Applies `f` to every parameter buffer, then re-clamps and bumps the
    /// version.
    pub fn update_with(&mut self, mut f: impl FnMut(usize, &mut [f64])) {
        for (i, s) in self.slices_mut().into_iter().enumerate() {
            f(i, s);
        }
        self.finish_update();
    }
}

/// Gradient of the loss with respect to one posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGrad {
    pub mu: VectorField,
    pub log_var: VectorField,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub global: PosteriorGrad,
    pub chunks: Vec<PosteriorGrad>,
}

impl ParamGrads {
    pub fn zeros(params: &PosteriorSet) -> Self {
        let z = |p: &VelocityPosterior| PosteriorGrad {
            mu: VectorField::zeros(p.shape()),
            log_var: VectorField::zeros(p.shape()),
        };
        Self {
            global: z(&params.global),
            chunks: params.chunks.iter().map(z).collect(),
        }
    }

    pub(crate) fn get_mut(&mut self, r: PosteriorRef) -> &mut PosteriorGrad {
        match r {
            PosteriorRef::Global => &mut self.global,
            PosteriorRef::Chunk(i) => &mut self.chunks[i],
        }
    }

    /// Same ordering as [`PosteriorSet::slices`].
    pub fn slices(&self) -> Vec<&[f64]> {
        std::iter::once(&self.global)
            .chain(&self.chunks)
            .flat_map(|g| [g.mu.data(), g.log_var.data()])
            .collect()
    }
}

/// Standard-normal draws for one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSet {
    pub global: VectorField,
    pub chunks: Vec<VectorField>,
}

impl NoiseSet {
    pub fn zeros(params: &PosteriorSet) -> Self {
        Self {
            global: VectorField::zeros(params.global.shape()),
            chunks: params
                .chunks
                .iter()
                .map(|p| VectorField::zeros(p.shape()))
                .collect(),
        }
    }

    pub fn draw(params: &PosteriorSet, rng: &mut impl rand::Rng) -> Self {
        let mut draw = |shape: GridShape| {
            let n = shape.len() * shape.ndim();
            let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
            VectorField::from_raw_parts(shape, data)
        };
        let global = draw(params.global.shape());
        let chunks = params.chunks.iter().map(|p| draw(p.shape())).collect();
        Self { global, chunks }
    }
}

fn coarse_shape(full: GridShape) -> GridShape {
    downsample(&ScalarField::zeros(full)).shape()
}

/// Images and layout of one registration, prepared once.
#[derive(Clone, Debug)]
pub struct DdrProblem {
    source: ScalarField,
    target: ScalarField,
    source_down: ScalarField,
    target_down: ScalarField,
    source_chunks: Vec<ScalarField>,
    target_chunks: Vec<ScalarField>,
    layout: ChunkLayout,
    config: RunConfig,
}

impl DdrProblem {
    pub fn new(source: &ScalarField, target: &ScalarField, config: &RunConfig) -> Result<Self> {
        Error::check_shape(source.shape(), target.shape())?;
        config.validate()?;
        let shape = source.shape();
        if let Some(&d) = shape.dims().iter().find(|&&d| d % 2 != 0) {
            return Err(Error::InvalidShape(format!(
                "registration needs even extents on every axis, got {d} in {shape}"
            )));
        }
        for (name, img) in [("source", source), ("target", target)] {
            let (lo, hi) = img.min_max();
            if lo < 0.0 || hi > 1.0 {
                return Err(Error::InvalidField(format!(
                    "{name} intensities must lie in [0, 1], found [{lo}, {hi}]"
                )));
            }
        }
        let layout = make_chunk_layout(shape, config.pyramid.overlap)?;
        Ok(Self {
            source_down: downsample(source),
            target_down: downsample(target),
            source_chunks: split_chunks(source, &layout)?,
            target_chunks: split_chunks(target, &layout)?,
            source: source.clone(),
            target: target.clone(),
            layout,
            config: *config,
        })
    }

    pub fn layout(&self) -> &ChunkLayout {
        &self.layout
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn source(&self) -> &ScalarField {
        &self.source
    }

    pub fn target(&self) -> &ScalarField {
        &self.target
    }

    pub fn initial_params(&self) -> PosteriorSet {
        PosteriorSet::initial(&self.layout, INITIAL_LOG_VAR)
    }

    fn check_params(&self, params: &PosteriorSet, noise: &NoiseSet) -> Result<()> {
        let coarse = self.source_down.shape();
        Error::check_shape(coarse, params.global.shape())?;
        Error::check_shape(coarse, noise.global.shape())?;
        for set_len in [params.chunks.len(), noise.chunks.len()] {
            if set_len != self.layout.len() {
                return Err(Error::ChunkCount {
                    expected: self.layout.len(),
                    found: set_len,
                });
            }
        }
        for (p, n) in params.chunks.iter().zip(&noise.chunks) {
            Error::check_shape(self.layout.chunk_shape(), p.shape())?;
            Error::check_shape(self.layout.chunk_shape(), n.shape())?;
        }
        Ok(())
    }
}

/// Handles to the interesting nodes of a recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    velocity_down: tape::VarId,
    phi_down: tape::VarId,
    phi_chunks: Vec<tape::VarId>,
    fused_velocity: tape::VarId,
    phi_full: tape::VarId,
}

/// Recorded evaluation of the registration graph.
#[derive(Debug)]
pub struct Forward<'a> {
    pub loss: LossBreakdown,
    pub tape: Tape<'a>,
    nodes: ForwardNodes,
}

impl Forward<'_> {
    pub fn velocity_down(&self) -> &VectorField {
        self.tape.value(self.nodes.velocity_down)
    }

    pub fn phi_down(&self) -> Deformation {
        Deformation::from_displacement(self.tape.value(self.nodes.phi_down).clone())
    }

    pub fn phi_chunks(&self) -> Vec<Deformation> {
        self.nodes
            .phi_chunks
            .iter()
            .map(|&id| Deformation::from_displacement(self.tape.value(id).clone()))
            .collect()
    }

    pub fn fused_velocity(&self) -> &VectorField {
        self.tape.value(self.nodes.fused_velocity)
    }

    pub fn phi_full(&self) -> Deformation {
        Deformation::from_displacement(self.tape.value(self.nodes.phi_full).clone())
    }

    /// Warped sources of every branch, as recorded.
    pub fn outputs(&self) -> crate::objective::BranchOutputs {
        let get = |b| {
            self.tape
                .warped(b)
                .cloned()
                .expect("every branch is recorded")
        };
        crate::objective::BranchOutputs {
            down: get(Branch::Down),
            chunks: (0..self.nodes.phi_chunks.len())
                .map(|i| get(Branch::Chunk(i)))
                .collect(),
            full: get(Branch::Full),
        }
    }
}

/// Evaluates the full multi-scale graph and records it for differentiation.
pub fn forward_ddr<'a>(
    problem: &'a DdrProblem,
    params: &PosteriorSet,
    noise: &NoiseSet,
) -> Result<Forward<'a>> {
    problem.check_params(params, noise)?;
    let cfg = &problem.config;
    let obj = &cfg.objective;
    let w = obj.branch_weights;
    let k = problem.layout.len() as f64;
    let mut tape = Tape::new(&problem.layout, *obj, params.version());

    // Downsampled branch.
    let v_down = sample_velocity(&params.global, &noise.global)?;
    let v_down_id = tape.sample(PosteriorRef::Global, noise.global.clone(), v_down.clone());
    let (phi_down, trace) = exponentiate_traced(&v_down, &cfg.integration)?;
    let warped_down = warp_values(problem.source_down.values(), phi_down.displacement());
    let phi_down_id = tape.exp(v_down_id, trace, phi_down.into_displacement());
    let warped_down = ScalarField::new(problem.source_down.shape(), warped_down)?;
    let mse_down = mse_loss(&warped_down, &problem.target_down, obj)?;
    tape.warp_match(
        Branch::Down,
        problem.source_down.values(),
        &problem.target_down,
        phi_down_id,
        warped_down,
        w.down,
    );
    let kl_global = kl_loss(&params.global, obj);
    tape.kl(PosteriorRef::Global, w.down * obj.kl_weight);

    // Chunk branch.
    let mut chunk_velocities = Vec::with_capacity(params.chunks.len());
    let mut chunk_ids = Vec::with_capacity(params.chunks.len());
    let mut phi_chunk_ids = Vec::with_capacity(params.chunks.len());
    let mut mse_chunks = Vec::with_capacity(params.chunks.len());
    let mut kl_chunks = Vec::with_capacity(params.chunks.len());
    for (i, (post, eps)) in params.chunks.iter().zip(&noise.chunks).enumerate() {
        let v = sample_velocity(post, eps)?;
        let v_id = tape.sample(PosteriorRef::Chunk(i), eps.clone(), v.clone());
        let (phi, trace) = exponentiate_traced(&v, &cfg.integration)?;
        let warped = warp_values(problem.source_chunks[i].values(), phi.displacement());
        let phi_id = tape.exp(v_id, trace, phi.into_displacement());
        let warped = ScalarField::new(problem.layout.chunk_shape(), warped)?;
        mse_chunks.push(mse_loss(&warped, &problem.target_chunks[i], obj)?);
        tape.warp_match(
            Branch::Chunk(i),
            problem.source_chunks[i].values(),
            &problem.target_chunks[i],
            phi_id,
            warped,
            w.chunk / k,
        );
        kl_chunks.push(kl_loss(post, obj));
        tape.kl(PosteriorRef::Chunk(i), w.chunk / k * obj.kl_weight);
        chunk_velocities.push(v);
        chunk_ids.push(v_id);
        phi_chunk_ids.push(phi_id);
    }

    // Full-resolution branch on the fused velocity.
    let v_local = merge_chunks(&chunk_velocities, &problem.layout)?;
    let v_local_id = tape.merge(chunk_ids, v_local.clone());
    let v_up = upsample(&v_down);
    let v_up_id = tape.upsample(v_down_id, v_up.clone());
    let gw = cfg.pyramid.global_weight;
    let mut fused = v_up.scaled(gw);
    fused.axpy(1.0 - gw, &v_local);
    let fused_id = tape.linear_combination(v_up_id, gw, v_local_id, 1.0 - gw, fused.clone());
    let (phi_full, trace) = exponentiate_traced(&fused, &cfg.integration)?;
    let warped_full = warp_values(problem.source.values(), phi_full.displacement());
    let phi_full_id = tape.exp(fused_id, trace, phi_full.into_displacement());
    let warped_full = ScalarField::new(problem.source.shape(), warped_full)?;
    let mse_full = mse_loss(&warped_full, &problem.target, obj)?;
    tape.warp_match(
        Branch::Full,
        problem.source.values(),
        &problem.target,
        phi_full_id,
        warped_full,
        w.full,
    );

    let loss = LossBreakdown::assemble(mse_down, kl_global, mse_chunks, kl_chunks, mse_full, obj);
    Ok(Forward {
        loss,
        tape,
        nodes: ForwardNodes {
            velocity_down: v_down_id,
            phi_down: phi_down_id,
            phi_chunks: phi_chunk_ids,
            fused_velocity: fused_id,
            phi_full: phi_full_id,
        },
    })
}

/// Exact gradients of the recorded loss with respect to every mean and
/// log-variance.
pub fn backward_ddr(tape: &mut Tape<'_>, params: &PosteriorSet) -> Result<ParamGrads> {
    tape.backward(params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Total of the sampled (noisy) objective used for the gradient; `None`
    /// for the initial evaluation.
    pub sampled_total: Option<f64>,
    /// Noise-free objective at the parameters after this iteration.
    pub eval: LossBreakdown,
    pub best_total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    Patience,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub params: PosteriorSet,
    pub fused_velocity: VectorField,
    pub velocity_down: VectorField,
    pub phi_full: Deformation,
    pub phi_down: Deformation,
    pub phi_chunks: Vec<Deformation>,
    pub loss_trace: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub config: RunConfig,
}

impl RegistrationResult {
    pub fn global_posterior(&self) -> &VelocityPosterior {
        &self.params.global
    }

    pub fn chunk_posteriors(&self) -> &[VelocityPosterior] {
        &self.params.chunks
    }

    pub fn converged(&self) -> bool {
        self.stop_reason == StopReason::Patience
    }

    pub fn initial_loss(&self) -> f64 {
        self.loss_trace[0].eval.total
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_trace.last().map_or(f64::NAN, |r| r.best_total)
    }
}

/// Fits the global and chunk velocity posteriors of one image pair.
///
/// Starts from zero means and `INITIAL_LOG_VAR`, takes one Adam step per
/// iteration on a single reparameterized sample, and keeps the parameters
/// with the best noise-free objective. Stops after `max_iters` or when the
/// best objective has not improved by `min_rel_improvement` (relative) for
/// `patience` iterations. The returned deformations use `v = mu`.
///
/// A zero chunk weight switches the local branch off: chunk posteriors stay
/// at their initial zero mean and draw no noise, so the fused velocity is the
/// average of the upsampled global velocity and a zero local one.
pub fn register_pair(
    source: &ScalarField,
    target: &ScalarField,
    config: &RunConfig,
) -> Result<RegistrationResult> {
    let problem = DdrProblem::new(source, target, config)?;
    register_problem(&problem)
}

pub fn register_problem(problem: &DdrProblem) -> Result<RegistrationResult> {
    let cfg = problem.config.optimizer;
    let mut params = problem.initial_params();
    let zero_noise = NoiseSet::zeros(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&params);

    let initial = forward_ddr(problem, &params, &zero_noise)?.loss;
    let mut best_total = initial.total;
    let mut best_params = params.clone();
    let mut reference = initial.total;
    let mut stalled = 0usize;
    let local_off = problem.config.objective.branch_weights.chunk == 0.0;
    let mut trace = vec![IterationRecord {
        iteration: 0,
        sampled_total: None,
        eval: initial,
        best_total,
    }];
    let mut stop_reason = StopReason::MaxIterations;
    let mut iterations = 0;

    for it in 1..=cfg.max_iters {
        let diverged = |params: &PosteriorSet| Error::RegistrationDiverged {
            iteration: it,
            last_finite_loss: best_total,
            last_state: Box::new(params.clone()),
        };
        let mut noise = NoiseSet::draw(&params, &mut rng);
        if local_off {
            noise.chunks = zero_noise.chunks.clone();
        }
        let mut fwd = match forward_ddr(problem, &params, &noise) {
            Ok(f) if f.loss.total.is_finite() => f,
            Ok(_) | Err(Error::Divergent(_)) => return Err(diverged(&params)),
            Err(e) => return Err(e),
        };
        let sampled_total = fwd.loss.total;
        let mut grads = backward_ddr(&mut fwd.tape, &params)?;
        drop(fwd);
        if local_off {
            grads.chunks = ParamGrads::zeros(&params).chunks;
        }
        let before = params.clone();
        match adam_step(&mut params, &grads, &mut adam, &cfg, it as u64) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient(_)) => return Err(diverged(&before)),
            Err(e) => return Err(e),
        }

        let eval = match forward_ddr(problem, &params, &zero_noise) {
            Ok(f) if f.loss.total.is_finite() => f.loss,
            Ok(_) | Err(Error::Divergent(_)) => return Err(diverged(&before)),
            Err(e) => return Err(e),
        };
        if eval.total < best_total {
            best_total = eval.total;
            best_params = params.clone();
        }
        if eval.total < reference - cfg.min_rel_improvement * reference.abs() {
            reference = eval.total;
            stalled = 0;
        } else {
            stalled += 1;
        }
        trace.push(IterationRecord {
            iteration: it,
            sampled_total: Some(sampled_total),
            eval,
            best_total,
        });
        iterations = it;
        if stalled >= cfg.patience {
            stop_reason = StopReason::Patience;
            break;
        }
    }

    let fwd = forward_ddr(problem, &best_params, &NoiseSet::zeros(&best_params))?;
    Ok(RegistrationResult {
        fused_velocity: fwd.fused_velocity().clone(),
        velocity_down: fwd.velocity_down().clone(),
        phi_full: fwd.phi_full(),
        phi_down: fwd.phi_down(),
        phi_chunks: fwd.phi_chunks(),
        params: best_params,
        loss_trace: trace,
        stop_reason,
        iterations,
        config: problem.config,
    })
}
