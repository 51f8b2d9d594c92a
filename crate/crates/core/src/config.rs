//! Run configuration: every tunable of a registration, read from a flat
//! `key = value` file with `#` comments.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::integrate::IntegrationConfig;
use crate::objective::ObjectiveConfig;
use crate::optimizer::OptimizerConfig;
use crate::pyramid::PyramidConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub integration: IntegrationConfig,
    pub objective: ObjectiveConfig,
    pub optimizer: OptimizerConfig,
    pub pyramid: PyramidConfig,
}

/// Recognised keys, in the order they are echoed.
pub const KEYS: &[&str] = &[
    "target_max_step",
    "max_squarings",
    "kl_weight",
    "prior_precision",
    "w_down",
    "w_chunk",
    "w_full",
    "image_noise_var",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "max_iters",
    "patience",
    "min_rel_improvement",
    "seed",
    "overlap",
    "global_weight",
];

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("line {line}: cannot parse {key} = {value:?}")))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.integration.validate()?;
        self.objective.validate()?;
        self.optimizer.validate()?;
        self.pyramid.validate()
    }

    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let w = &mut self.objective.branch_weights;
        match key {
            "target_max_step" => self.integration.target_max_step = parse(key, value, line)?,
            "max_squarings" => self.integration.max_squarings = parse(key, value, line)?,
            "kl_weight" => self.objective.kl_weight = parse(key, value, line)?,
            "prior_precision" => self.objective.prior_precision = parse(key, value, line)?,
            "w_down" => w.down = parse(key, value, line)?,
            "w_chunk" => w.chunk = parse(key, value, line)?,
            "w_full" => w.full = parse(key, value, line)?,
            "image_noise_var" => self.objective.image_noise_var = parse(key, value, line)?,
            "learning_rate" => self.optimizer.learning_rate = parse(key, value, line)?,
            "beta1" => self.optimizer.beta1 = parse(key, value, line)?,
            "beta2" => self.optimizer.beta2 = parse(key, value, line)?,
            "epsilon" => self.optimizer.epsilon = parse(key, value, line)?,
            "max_iters" => self.optimizer.max_iters = parse(key, value, line)?,
            "patience" => self.optimizer.patience = parse(key, value, line)?,
            "min_rel_improvement" => self.optimizer.min_rel_improvement = parse(key, value, line)?,
            "seed" => self.optimizer.seed = parse(key, value, line)?,
            "overlap" => self.pyramid.overlap = parse(key, value, line)?,
            "global_weight" => self.pyramid.global_weight = parse(key, value, line)?,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "line {line}: unknown key {key:?}"
                )));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", n + 1))
            })?;
            cfg.set(key.trim(), value.trim(), n + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let w = self.objective.branch_weights;
        Some(match key {
            "target_max_step" => self.integration.target_max_step.to_string(),
            "max_squarings" => self.integration.max_squarings.to_string(),
            "kl_weight" => self.objective.kl_weight.to_string(),
            "prior_precision" => self.objective.prior_precision.to_string(),
            "w_down" => w.down.to_string(),
            "w_chunk" => w.chunk.to_string(),
            "w_full" => w.full.to_string(),
            "image_noise_var" => self.objective.image_noise_var.to_string(),
            "learning_rate" => self.optimizer.learning_rate.to_string(),
            "beta1" => self.optimizer.beta1.to_string(),
            "beta2" => self.optimizer.beta2.to_string(),
            "epsilon" => self.optimizer.epsilon.to_string(),
            "max_iters" => self.optimizer.max_iters.to_string(),
            "patience" => self.optimizer.patience.to_string(),
            "min_rel_improvement" => self.optimizer.min_rel_improvement.to_string(),
            "seed" => self.optimizer.seed.to_string(),
            "overlap" => self.pyramid.overlap.to_string(),
            "global_weight" => self.pyramid.global_weight.to_string(),
            _ => return None,
        })
    }

    /// Every key with its resolved value, one `key = value` per line, in a
    /// form [`RunConfig::parse`] reads back to the same configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }
}
