//! Scaling-and-squaring exponential of stationary velocity fields.
//!
//! `exp(v)` is approximated by scaling `v` down by `2^N` so that the small
//! deformation `id + v / 2^N` is accurate to first order, then composing it
//! with itself `N` times. The squaring count is picked from the field's
//! largest component and is treated as a constant when differentiating.

use crate::error::{Error, Result};
use crate::field::{compose_displacements, compose_vjp, Deformation, VectorField};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegrationConfig {
    /// Largest per-voxel displacement, in voxels, allowed after scaling.
    pub target_max_step: f64,
    /// Upper bound on the number of squarings.
    pub max_squarings: u32,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            target_max_step: 0.5,
            max_squarings: 10,
        }
    }
}

impl IntegrationConfig {
    pub const MAX_SQUARINGS_LIMIT: u32 = 16;

    pub fn validate(&self) -> Result<()> {
        if !(self.target_max_step > 0.0 && self.target_max_step <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "target_max_step must be in (0, 1], got {}",
                self.target_max_step
            )));
        }
        if self.max_squarings > Self::MAX_SQUARINGS_LIMIT {
            return Err(Error::InvalidConfig(format!(
                "max_squarings must be <= {}, got {}",
                Self::MAX_SQUARINGS_LIMIT,
                self.max_squarings
            )));
        }
        Ok(())
    }
}

/// `clamp(ceil(log2(max|v| / target)), 0, max_squarings)`.
pub fn choose_steps(v: &VectorField, cfg: &IntegrationConfig) -> u32 {
    let m = v.max_abs();
    if !(m > cfg.target_max_step) {
        return 0;
    }
    let n = (m / cfg.target_max_step).log2().ceil();
    (n.max(0.0) as u32).min(cfg.max_squarings)
}

/// Intermediate displacements `u_0 .. u_{N-1}` of one exponentiation, kept
/// for the reverse pass.
#[derive(Clone, Debug)]
pub(crate) struct ExpTrace {
    scale: f64,
    stages: Vec<VectorField>,
}

pub(crate) fn exponentiate_traced(
    v: &VectorField,
    cfg: &IntegrationConfig,
) -> Result<(Deformation, ExpTrace)> {
    cfg.validate()?;
    if !v.is_finite() {
        return Err(Error::Divergent(
            "velocity field has non-finite entries".into(),
        ));
    }
    let n = choose_steps(v, cfg);
    let scale = 0.5f64.powi(n as i32);
    let mut u = v.scaled(scale);
    let mut stages = Vec::with_capacity(n as usize);
    for step in 0..n {
        let next = compose_displacements(&u, &u);
        if !next.is_finite() {
            return Err(Error::Divergent(format!(
                "non-finite displacement after squaring {}",
                step + 1
            )));
        }
        stages.push(std::mem::replace(&mut u, next));
    }
    Ok((
        Deformation::from_displacement(u),
        ExpTrace { scale, stages },
    ))
}

/// Reverse pass through the squarings and the initial scaling.
pub(crate) fn exponentiate_backward(trace: &ExpTrace, grad_out: &VectorField) -> VectorField {
    let mut g = grad_out.clone();
    for u in trace.stages.iter().rev() {
        let (ga, mut gb) = compose_vjp(u, u, &g);
        gb.axpy(1.0, &ga);
        g = gb;
    }
    g.scaled(trace.scale)
}

/// `phi = exp(v)`, the time-one flow of the stationary field `v`.
pub fn exponentiate(v: &VectorField, cfg: &IntegrationConfig) -> Result<Deformation> {
    exponentiate_traced(v, cfg).map(|(phi, _)| phi)
}

/// Vector-Jacobian product of [`exponentiate`]: `dL/dv` given `dL/du`, with
/// the squaring count held at `choose_steps(v, cfg)`.
pub fn exponentiate_vjp(
    v: &VectorField,
    cfg: &IntegrationConfig,
    grad_phi: &VectorField,
) -> Result<VectorField> {
    Error::check_shape(v.shape(), grad_phi.shape())?;
    let (_, trace) = exponentiate_traced(v, cfg)?;
    Ok(exponentiate_backward(&trace, grad_phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridShape;

    fn s2(n: usize) -> GridShape {
        GridShape::new2(n, n).unwrap()
    }

    #[test]
    fn step_selection() {
        let cfg = IntegrationConfig::default();
        assert_eq!(choose_steps(&VectorField::zeros(s2(4)), &cfg), 0);
        assert_eq!(
            choose_steps(&VectorField::constant(s2(4), &[4.0, -1.0]), &cfg),
            3
        );
        assert_eq!(
            choose_steps(&VectorField::constant(s2(4), &[0.3, 0.0]), &cfg),
            0
        );
        assert_eq!(
            choose_steps(&VectorField::constant(s2(4), &[-0.5, 0.0]), &cfg),
            0
        );
        let capped = IntegrationConfig {
            max_squarings: 2,
            ..cfg
        };
        assert_eq!(
            choose_steps(&VectorField::constant(s2(4), &[1e6, 0.0]), &capped),
            2
        );
    }

    #[test]
    fn config_bounds() {
        assert!(IntegrationConfig::default().validate().is_ok());
        let bad = IntegrationConfig {
            target_max_step: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = IntegrationConfig {
            max_squarings: 17,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_velocity_gives_identity() {
        let phi = exponentiate(&VectorField::zeros(s2(8)), &IntegrationConfig::default()).unwrap();
        assert_eq!(phi, Deformation::identity(s2(8)));
    }

    #[test]
    fn non_finite_velocity_is_divergent() {
        let mut v = VectorField::zeros(s2(4));
        v.data_mut()[3] = f64::INFINITY;
        assert!(matches!(
            exponentiate(&v, &IntegrationConfig::default()),
            Err(Error::Divergent(_))
        ));
    }

    #[test]
    fn vjp_without_squarings_is_passthrough() {
        let v = VectorField::constant(s2(6), &[0.2, -0.1]);
        let g = VectorField::from_fn(s2(6), |[x, y, _]| [x as f64, -(y as f64), 0.0]);
        let out = exponentiate_vjp(&v, &IntegrationConfig::default(), &g).unwrap();
        assert_eq!(out, g);
        let zero = exponentiate_vjp(
            &VectorField::constant(s2(6), &[3.0, 1.0]),
            &IntegrationConfig::default(),
            &VectorField::zeros(s2(6)),
        )
        .unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));
    }
}
