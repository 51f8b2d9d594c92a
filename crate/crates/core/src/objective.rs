//! Variational registration objective: reparameterized velocity sampling,
//! intensity matching at every scale, and a Gaussian KL term against a
//! graph-Laplacian smoothness prior.
//!
//! The KL term drops the constant parts (prior log-determinant, dimension
//! terms), so reported values are defined up to an additive constant.

use crate::error::{Error, Result};
use crate::field::{GridShape, ScalarField, VectorField};
use crate::pyramid::{split_chunks, ChunkLayout};

pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 5.0;

/// Diagonal Gaussian over a velocity field.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityPosterior {
    mu: VectorField,
    log_var: VectorField,
}

impl VelocityPosterior {
    /// Clamps `log_var` into `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn new(mu: VectorField, mut log_var: VectorField) -> Result<Self> {
        Error::check_shape(mu.shape(), log_var.shape())?;
        clamp_log_var(log_var.data_mut());
        Ok(Self { mu, log_var })
    }

    pub fn constant(shape: GridShape, log_var: f64) -> Self {
        let lv = log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        let d = shape.ndim();
        Self {
            mu: VectorField::zeros(shape),
            log_var: VectorField::constant(shape, &vec![lv; d]),
        }
    }

    pub fn shape(&self) -> GridShape {
        self.mu.shape()
    }

    pub fn mu(&self) -> &VectorField {
        &self.mu
    }

    pub fn log_var(&self) -> &VectorField {
        &self.log_var
    }

    pub(crate) fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [self.mu.data_mut(), self.log_var.data_mut()]
    }

    pub(crate) fn clamp(&mut self) {
        clamp_log_var(self.log_var.data_mut());
    }
}

fn clamp_log_var(lv: &mut [f64]) {
    for v in lv {
        *v = v.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchWeights {
    pub down: f64,
    pub chunk: f64,
    pub full: f64,
}

impl Default for BranchWeights {
    fn default() -> Self {
        Self {
            down: 1.0,
            chunk: 1.0,
            full: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    /// Weight of each KL term relative to its matching term.
    pub kl_weight: f64,
    /// Strength of the Laplacian smoothness prior.
    pub prior_precision: f64,
    pub branch_weights: BranchWeights,
    /// Image noise variance; the matching term is `SSE / (2 var N)`.
    pub image_noise_var: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kl_weight: 1e-5,
            prior_precision: 10.0,
            branch_weights: BranchWeights::default(),
            image_noise_var: 0.01,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.branch_weights;
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "{name} must be finite and >= 0, got {v}"
                )))
            }
        };
        nonneg("kl_weight", self.kl_weight)?;
        nonneg("w_down", w.down)?;
        nonneg("w_chunk", w.chunk)?;
        nonneg("w_full", w.full)?;
        if w.down + w.chunk + w.full <= 0.0 {
            return Err(Error::InvalidConfig(
                "at least one branch weight must be > 0".into(),
            ));
        }
        for (name, v) in [
            ("prior_precision", self.prior_precision),
            ("image_noise_var", self.image_noise_var),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `v = mu + exp(log_var / 2) * noise`.
pub fn sample_velocity(post: &VelocityPosterior, noise: &VectorField) -> Result<VectorField> {
    Error::check_shape(post.shape(), noise.shape())?;
    let data = post
        .mu
        .data()
        .iter()
        .zip(post.log_var.data())
        .zip(noise.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    VectorField::new(post.shape(), data)
}

/// Gradients of `sum grad . v` with respect to `(mu, log_var)`.
pub(crate) fn sample_velocity_vjp(
    post: &VelocityPosterior,
    noise: &VectorField,
    grad: &VectorField,
) -> (VectorField, VectorField) {
    let d_lv = post
        .log_var
        .data()
        .iter()
        .zip(noise.data())
        .zip(grad.data())
        .map(|((lv, e), g)| 0.5 * (0.5 * lv).exp() * e * g)
        .collect();
    (
        grad.clone(),
        VectorField::from_raw_parts(post.shape(), d_lv),
    )
}

/// `sum (warped - target)^2 / (2 var N)`.
pub fn mse_loss(warped: &ScalarField, target: &ScalarField, cfg: &ObjectiveConfig) -> Result<f64> {
    Error::check_shape(target.shape(), warped.shape())?;
    let sse: f64 = warped
        .values()
        .iter()
        .zip(target.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sse / (2.0 * cfg.image_noise_var * warped.values().len() as f64))
}

/// Derivative of [`mse_loss`] with respect to each warped voxel.
pub(crate) fn mse_grad(warped: &[f64], target: &[f64], cfg: &ObjectiveConfig) -> Vec<f64> {
    let c = 1.0 / (cfg.image_noise_var * warped.len() as f64);
    warped
        .iter()
        .zip(target)
        .map(|(a, b)| c * (a - b))
        .collect()
}

/// Visits each grid-graph edge `(p, q)` once, as storage indices.
fn for_each_edge(shape: GridShape, mut f: impl FnMut(usize, usize)) {
    for (i, c) in shape.voxels().enumerate() {
        for a in 0..shape.ndim() {
            if c[a] + 1 < shape.extent(a) {
                f(i, i + shape.stride(a));
            }
        }
    }
}

fn degree(shape: GridShape, c: [usize; 3]) -> f64 {
    (0..shape.ndim())
        .map(|a| {
            let n = shape.extent(a);
            (c[a] > 0) as usize + (c[a] + 1 < n) as usize
        })
        .sum::<usize>() as f64
}

/// KL(q || p) for `q = N(mu, diag sigma^2)` and `p = N(0, (lambda L)^-1)`,
/// without constant terms:
/// `0.5 * [lambda * (sum_edges |mu_p - mu_q|^2 + sum_p deg(p) sigma^2(p)) - sum log sigma^2]`.
pub fn kl_loss(post: &VelocityPosterior, cfg: &ObjectiveConfig) -> f64 {
    let shape = post.shape();
    let d = shape.ndim();
    let mu = post.mu.data();
    let lv = post.log_var.data();
    let mut edge = 0.0;
    for_each_edge(shape, |p, q| {
        for c in 0..d {
            let diff = mu[p * d + c] - mu[q * d + c];
            edge += diff * diff;
        }
    });
    let mut var_term = 0.0;
    let mut log_term = 0.0;
    for (i, c) in shape.voxels().enumerate() {
        let deg = degree(shape, c);
        for k in 0..d {
            let l = lv[i * d + k];
            var_term += deg * l.exp();
            log_term += l;
        }
    }
    0.5 * (cfg.prior_precision * (edge + var_term) - log_term)
}

/// Gradients of [`kl_loss`] with respect to `(mu, log_var)`.
pub(crate) fn kl_grad(
    post: &VelocityPosterior,
    cfg: &ObjectiveConfig,
) -> (VectorField, VectorField) {
    let shape = post.shape();
    let d = shape.ndim();
    let lambda = cfg.prior_precision;
    let mu = post.mu.data();
    let mut g_mu = vec![0.0; mu.len()];
    for_each_edge(shape, |p, q| {
        for c in 0..d {
            let diff = lambda * (mu[p * d + c] - mu[q * d + c]);
            g_mu[p * d + c] += diff;
            g_mu[q * d + c] -= diff;
        }
    });
    let lv = post.log_var.data();
    let mut g_lv = vec![0.0; lv.len()];
    for (i, c) in shape.voxels().enumerate() {
        let deg = degree(shape, c);
        for k in 0..d {
            g_lv[i * d + k] = 0.5 * (lambda * deg * lv[i * d + k].exp() - 1.0);
        }
    }
    (
        VectorField::from_raw_parts(shape, g_mu),
        VectorField::from_raw_parts(shape, g_lv),
    )
}

/// Warped sources produced by each branch.
#[derive(Clone, Debug)]
pub struct BranchOutputs {
    pub down: ScalarField,
    pub chunks: Vec<ScalarField>,
    pub full: ScalarField,
}

/// Unweighted loss terms of one evaluation together with the weights that
/// combine them.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mse_down: f64,
    pub kl_global: f64,
    pub mse_chunks: Vec<f64>,
    pub kl_chunks: Vec<f64>,
    pub mse_full: f64,
    pub weights: BranchWeights,
    pub kl_weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub(crate) fn assemble(
        mse_down: f64,
        kl_global: f64,
        mse_chunks: Vec<f64>,
        kl_chunks: Vec<f64>,
        mse_full: f64,
        cfg: &ObjectiveConfig,
    ) -> Self {
        let mut b = Self {
            mse_down,
            kl_global,
            mse_chunks,
            kl_chunks,
            mse_full,
            weights: cfg.branch_weights,
            kl_weight: cfg.kl_weight,
            total: 0.0,
        };
        b.total = b.addends().iter().map(|(_, v)| v).sum();
        b
    }

    /// Weighted addends of the total, in summation order.
    pub fn addends(&self) -> Vec<(String, f64)> {
        let w = self.weights;
        let k = self.mse_chunks.len().max(1) as f64;
        let mut out = vec![
            ("down.mse".to_string(), w.down * self.mse_down),
            (
                "down.kl".to_string(),
                w.down * self.kl_weight * self.kl_global,
            ),
        ];
        for (i, (m, kl)) in self.mse_chunks.iter().zip(&self.kl_chunks).enumerate() {
            out.push((format!("chunk{i}.mse"), w.chunk / k * m));
            out.push((format!("chunk{i}.kl"), w.chunk / k * self.kl_weight * kl));
        }
        out.push(("full.mse".to_string(), w.full * self.mse_full));
        out
    }
}

/// `w_down [mse_down + l kl_g] + w_chunk / k sum_i [mse_i + l kl_i] + w_full mse_full`.
pub fn ddr_total_loss(
    target: &ScalarField,
    outputs: &BranchOutputs,
    global: &VelocityPosterior,
    chunks: &[VelocityPosterior],
    layout: &ChunkLayout,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    Error::check_shape(layout.full_shape(), target.shape())?;
    if chunks.len() != layout.len() || outputs.chunks.len() != layout.len() {
        return Err(Error::ChunkCount {
            expected: layout.len(),
            found: chunks.len().min(outputs.chunks.len()),
        });
    }
    let target_down = crate::field::downsample(target);
    Error::check_shape(target_down.shape(), global.shape())?;
    let target_chunks = split_chunks(target, layout)?;

    let mse_down = mse_loss(&outputs.down, &target_down, cfg)?;
    let kl_global = kl_loss(global, cfg);
    let mut mse_chunks = Vec::with_capacity(chunks.len());
    let mut kl_chunks = Vec::with_capacity(chunks.len());
    for ((warped, tgt), post) in outputs.chunks.iter().zip(&target_chunks).zip(chunks) {
        Error::check_shape(layout.chunk_shape(), post.shape())?;
        mse_chunks.push(mse_loss(warped, tgt, cfg)?);
        kl_chunks.push(kl_loss(post, cfg));
    }
    let mse_full = mse_loss(&outputs.full, target, cfg)?;
    Ok(LossBreakdown::assemble(
        mse_down, kl_global, mse_chunks, kl_chunks, mse_full, cfg,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s2(n: usize, m: usize) -> GridShape {
        GridShape::new2(n, m).unwrap()
    }

    fn half_var() -> ObjectiveConfig {
        ObjectiveConfig {
            image_noise_var: 0.5,
            ..Default::default()
        }
    }

    #[test]
    fn log_var_is_clamped() {
        let s = s2(2, 2);
        let p = VelocityPosterior::new(
            VectorField::zeros(s),
            VectorField::new(s, vec![-100.0, 100.0, 0.0, 1.0, 2.0, 3.0, 4.0, 6.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(p.log_var().data()[..2], [LOG_VAR_MIN, LOG_VAR_MAX]);
        assert_eq!(p.log_var().data()[7], LOG_VAR_MAX);
    }

    #[test]
    fn sampling_special_cases() {
        let s = s2(3, 3);
        let mu = VectorField::from_fn(s, |[x, y, _]| [x as f64, -(y as f64), 0.0]);
        let post =
            VelocityPosterior::new(mu.clone(), VectorField::constant(s, &[-3.0, 2.0])).unwrap();
        assert_eq!(sample_velocity(&post, &VectorField::zeros(s)).unwrap(), mu);

        let unit = VelocityPosterior::new(mu.clone(), VectorField::zeros(s)).unwrap();
        let eps = VectorField::from_fn(s, |[x, y, _]| [0.1 * y as f64, 0.3 - x as f64, 0.0]);
        assert_eq!(sample_velocity(&unit, &eps).unwrap(), mu.add(&eps).unwrap());
        assert!(sample_velocity(&unit, &VectorField::zeros(s2(3, 4))).is_err());
    }

    #[test]
    fn mse_examples() {
        let s = s2(3, 2);
        let a = ScalarField::from_fn(s, |[x, y, _]| (x + y) as f64);
        assert_eq!(mse_loss(&a, &a, &half_var()).unwrap(), 0.0);

        let shifted = ScalarField::from_fn(s, |[x, y, _]| (x + y) as f64 + 0.3);
        assert!((mse_loss(&shifted, &a, &half_var()).unwrap() - 0.09).abs() < 1e-15);

        // Rows [0,1,2] and [0,1,2] against all-ones.
        let ramp = ScalarField::from_fn(s, |[x, _, _]| x as f64);
        let ones = ScalarField::constant(s, 1.0);
        assert!((mse_loss(&ramp, &ones, &half_var()).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(mse_loss(&ramp, &ScalarField::zeros(s2(2, 3)), &half_var()).is_err());
    }

    #[test]
    fn kl_is_finite_at_clamp() {
        let post = VelocityPosterior::constant(s2(4, 4), -20.0);
        let v = kl_loss(&post, &ObjectiveConfig::default());
        assert!(v.is_finite());
        // Dominated by -0.5 * sum(log var) = 0.5 * 20 * 32.
        assert!((v - 320.0).abs() < 1e-4);
    }

    #[test]
    fn kl_hand_evaluated_2x2() {
        // 2x2 grid, scalar-like: mu_x = [0, 1; 0, 0], mu_y = 0, var = 1.
        // Edges: (0,1) |1|^2, (0,2) 0, (1,3) |1|^2, (2,3) 0 -> 2.
        // Degrees all 2, two components, var 1 -> 16.
        let s = s2(2, 2);
        let mu = VectorField::new(s, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let post = VelocityPosterior::new(mu, VectorField::zeros(s)).unwrap();
        let cfg = ObjectiveConfig {
            prior_precision: 1.0,
            ..Default::default()
        };
        assert!((kl_loss(&post, &cfg) - 0.5 * (2.0 + 16.0)).abs() < 1e-15);
    }

    #[test]
    fn kl_two_stacked_chains() {
        // Two rows of the 3-voxel chain mu_x = (0, 1, 0), var 1, lambda_p 1.
        // Each row alone gives 0.5 * (2 + 4) = 3 for that component. Stacked:
        // horizontal edges 4, vertical edges 0; degrees 2,3,2 per row -> 14
        // per component, two components -> 28. KL = 0.5 * (4 + 28) = 16.
        let s = s2(3, 2);
        let mut data = vec![0.0; 12];
        data[2] = 1.0;
        data[8] = 1.0;
        let post =
            VelocityPosterior::new(VectorField::new(s, data).unwrap(), VectorField::zeros(s))
                .unwrap();
        let cfg = ObjectiveConfig {
            prior_precision: 1.0,
            ..Default::default()
        };
        assert_eq!(kl_loss(&post, &cfg), 16.0);
    }

    #[test]
    fn kl_constant_mean_is_free() {
        let s = s2(5, 4);
        let cfg = ObjectiveConfig::default();
        let zero = VelocityPosterior::constant(s, -2.0);
        let shifted = VelocityPosterior::new(
            VectorField::constant(s, &[3.0, -1.0]),
            zero.log_var().clone(),
        )
        .unwrap();
        assert!((kl_loss(&zero, &cfg) - kl_loss(&shifted, &cfg)).abs() < 1e-12);
    }

    #[test]
    fn breakdown_weights() {
        let cfg = ObjectiveConfig {
            branch_weights: BranchWeights {
                down: 0.0,
                chunk: 0.0,
                full: 2.0,
            },
            ..Default::default()
        };
        let b = LossBreakdown::assemble(1.0, 5.0, vec![2.0; 4], vec![7.0; 4], 0.25, &cfg);
        assert_eq!(b.total, 0.5);
        let cfg = ObjectiveConfig {
            kl_weight: 0.01,
            ..Default::default()
        };
        let b = LossBreakdown::assemble(1.0, 5.0, vec![2.0; 4], vec![7.0; 4], 0.25, &cfg);
        assert!((b.total - (1.0 + 0.05 + 2.0 + 0.07 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(ObjectiveConfig::default().validate().is_ok());
        let mut c = ObjectiveConfig::default();
        c.branch_weights = BranchWeights {
            down: 0.0,
            chunk: 0.0,
            full: 0.0,
        };
        assert!(c.validate().is_err());
        let c = ObjectiveConfig {
            image_noise_var: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    fn random_posterior(
        shape: GridShape,
        seed: u64,
    ) -> (VelocityPosterior, VectorField, VectorField) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.len() * shape.ndim();
        let mut draw = |lo: f64, hi: f64| -> VectorField {
            VectorField::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
        };
        let post = VelocityPosterior::new(draw(-2.0, 2.0), draw(-3.0, 1.0)).unwrap();
        (post, draw(-2.0, 2.0), draw(-1.0, 1.0))
    }

    fn perturbed(post: &VelocityPosterior, which: usize, i: usize, h: f64) -> VelocityPosterior {
        let mut p = post.clone();
        p.params_mut()[which][i] += h;
        p
    }

    #[test]
    fn sampling_gradients_match_differences() {
        let s = s2(4, 3);
        let (post, noise, grad) = random_posterior(s, 5);
        let (g_mu, g_lv) = sample_velocity_vjp(&post, &noise, &grad);
        let probe = |p: &VelocityPosterior| -> f64 {
            let v = sample_velocity(p, &noise).unwrap();
            v.data().iter().zip(grad.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for (which, analytic) in [(0, &g_mu), (1, &g_lv)] {
            for i in 0..analytic.data().len() {
                let fd = (probe(&perturbed(&post, which, i, h))
                    - probe(&perturbed(&post, which, i, -h)))
                    / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - fd).abs() <= 1e-6 * a.abs().max(1e-3),
                    "{which} {i}: {a} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn kl_gradients_match_differences() {
        let s = s2(4, 5);
        let (post, _, _) = random_posterior(s, 8);
        let cfg = ObjectiveConfig {
            prior_precision: 3.0,
            ..Default::default()
        };
        let (g_mu, g_lv) = kl_grad(&post, &cfg);
        let h = 1e-5;
        for (which, analytic) in [(0, &g_mu), (1, &g_lv)] {
            for i in 0..analytic.data().len() {
                let fd = (kl_loss(&perturbed(&post, which, i, h), &cfg)
                    - kl_loss(&perturbed(&post, which, i, -h), &cfg))
                    / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - fd).abs() <= 1e-6 * a.abs().max(1.0),
                    "{which} {i}: {a} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn mse_gradient_matches_differences() {
        let s = s2(3, 3);
        let (post, noise, _) = random_posterior(s, 2);
        let a = post.mu().component(0);
        let b = noise.component(1);
        let cfg = ObjectiveConfig::default();
        let g = mse_grad(a.values(), b.values(), &cfg);
        let h = 1e-6;
        for i in 0..g.len() {
            let mut up = a.values().to_vec();
            let mut down = up.clone();
            up[i] += h;
            down[i] -= h;
            let f = |v: Vec<f64>| mse_loss(&ScalarField::new(s, v).unwrap(), &b, &cfg).unwrap();
            let fd = (f(up) - f(down)) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-6 * g[i].abs().max(1.0));
        }
    }
}
