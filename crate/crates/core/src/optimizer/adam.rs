use crate::error::{Error, Result};

use super::{OptimizerConfig, ParamGrads, PosteriorSet};

/// First and second moment estimates, one buffer per parameter field.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &PosteriorSet) -> Self {
        let sizes: Vec<usize> = params.slices().iter().map(|s| s.len()).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }
}

/// One bias-corrected Adam update at step `t >= 1`, followed by re-clamping
/// the log-variances.
pub fn adam_step(
    params: &mut PosteriorSet,
    grads: &ParamGrads,
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidConfig("Adam step index starts at 1".into()));
    }
    let g_slices = grads.slices();
    if g_slices.len() != state.m.len() {
        return Err(Error::InvalidConfig(
            "gradient layout does not match optimizer state".into(),
        ));
    }
    for (i, g) in g_slices.iter().enumerate() {
        if g.len() != state.m[i].len() {
            return Err(Error::InvalidConfig(format!(
                "gradient buffer {i} has {} entries, expected {}",
                g.len(),
                state.m[i].len()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("parameter buffer {i}")));
        }
    }

    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for (((p, g), m), v) in params
        .slices_mut()
        .into_iter()
        .zip(g_slices)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    params.finish_update();
    Ok(())
}
