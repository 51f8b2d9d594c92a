//! Reverse-mode record of one forward evaluation of the registration graph.
//!
//! Nodes are vector fields (velocities, displacements); scalar loss terms are
//! sinks. Operations are appended in execution order, so a single reverse
//! sweep sees every consumer before its producers.

use crate::error::{Error, Result};
use crate::field::{upsample_adjoint, warp_displacement_vjp, GridShape, ScalarField, VectorField};
use crate::integrate::{exponentiate_backward, ExpTrace};
use crate::objective::{kl_grad, mse_grad, sample_velocity_vjp, ObjectiveConfig};
use crate::pyramid::{merge_chunks_adjoint, ChunkLayout};

use super::{ParamGrads, PosteriorSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct VarId(usize);

/// Which posterior of a [`PosteriorSet`] an operation reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosteriorRef {
    Global,
    Chunk(usize),
}

/// The branch a matching term belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Down,
    Chunk(usize),
    Full,
}

#[derive(Debug)]
enum Op<'a> {
    Sample {
        posterior: PosteriorRef,
        noise: VectorField,
        out: VarId,
    },
    Exp {
        input: VarId,
        trace: ExpTrace,
        out: VarId,
    },
    Upsample {
        input: VarId,
        coarse: GridShape,
        out: VarId,
    },
    Merge {
        inputs: Vec<VarId>,
        out: VarId,
    },
    /// `out = a_weight * a + b_weight * b`.
    LinearCombination {
        a: VarId,
        a_weight: f64,
        b: VarId,
        b_weight: f64,
        out: VarId,
    },
    WarpMatch {
        branch: Branch,
        source: &'a [f64],
        target: &'a ScalarField,
        displacement: VarId,
        warped: ScalarField,
        weight: f64,
    },
    Kl {
        posterior: PosteriorRef,
        weight: f64,
    },
}

#[derive(Debug)]
pub struct Tape<'a> {
    values: Vec<VectorField>,
    ops: Vec<Op<'a>>,
    layout: &'a ChunkLayout,
    objective: ObjectiveConfig,
    version: u64,
    visited: Option<usize>,
}

impl<'a> Tape<'a> {
    pub(crate) fn new(layout: &'a ChunkLayout, objective: ObjectiveConfig, version: u64) -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            layout,
            objective,
            version,
            visited: None,
        }
    }

    fn push_value(&mut self, v: VectorField) -> VarId {
        self.values.push(v);
        VarId(self.values.len() - 1)
    }

    pub(crate) fn value(&self, id: VarId) -> &VectorField {
        &self.values[id.0]
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Operations visited by the completed backward sweep, if any.
    pub fn visited(&self) -> Option<usize> {
        self.visited
    }

    /// Parameter version the tape was recorded against.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn sample(
        &mut self,
        posterior: PosteriorRef,
        noise: VectorField,
        v: VectorField,
    ) -> VarId {
        let out = self.push_value(v);
        self.ops.push(Op::Sample {
            posterior,
            noise,
            out,
        });
        out
    }

    pub(crate) fn exp(&mut self, input: VarId, trace: ExpTrace, u: VectorField) -> VarId {
        let out = self.push_value(u);
        self.ops.push(Op::Exp { input, trace, out });
        out
    }

    pub(crate) fn upsample(&mut self, input: VarId, fine: VectorField) -> VarId {
        let coarse = self.value(input).shape();
        let out = self.push_value(fine);
        self.ops.push(Op::Upsample { input, coarse, out });
        out
    }

    pub(crate) fn merge(&mut self, inputs: Vec<VarId>, merged: VectorField) -> VarId {
        let out = self.push_value(merged);
        self.ops.push(Op::Merge { inputs, out });
        out
    }

    pub(crate) fn linear_combination(
        &mut self,
        a: VarId,
        a_weight: f64,
        b: VarId,
        b_weight: f64,
        combined: VectorField,
    ) -> VarId {
        let out = self.push_value(combined);
        self.ops.push(Op::LinearCombination {
            a,
            a_weight,
            b,
            b_weight,
            out,
        });
        out
    }

    pub(crate) fn warp_match(
        &mut self,
        branch: Branch,
        source: &'a [f64],
        target: &'a ScalarField,
        displacement: VarId,
        warped: ScalarField,
        weight: f64,
    ) {
        self.ops.push(Op::WarpMatch {
            branch,
            source,
            target,
            displacement,
            warped,
            weight,
        });
    }

    pub(crate) fn kl(&mut self, posterior: PosteriorRef, weight: f64) {
        self.ops.push(Op::Kl { posterior, weight });
    }

    /// Warped source recorded for `branch`.
    pub fn warped(&self, branch: Branch) -> Option<&ScalarField> {
        self.ops.iter().find_map(|op| match op {
            Op::WarpMatch {
                branch: b, warped, ..
            } if *b == branch => Some(warped),
            _ => None,
        })
    }

    /// Runs the reverse sweep once. A tape cannot be swept twice, and must
    /// be swept against the parameter version it was recorded with.
    pub(crate) fn backward(&mut self, params: &PosteriorSet) -> Result<ParamGrads> {
        if self.visited.is_some() {
            return Err(Error::TapeConsumed);
        }
        if params.version() != self.version {
            return Err(Error::StaleTape {
                recorded: self.version,
                current: params.version(),
            });
        }
        let mut grads = ParamGrads::zeros(params);
        let mut adj: Vec<Option<VectorField>> = vec![None; self.values.len()];
        let accumulate =
            |adj: &mut Vec<Option<VectorField>>, id: VarId, g: VectorField| match &mut adj[id.0] {
                Some(acc) => acc.axpy(1.0, &g),
                slot @ None => *slot = Some(g),
            };

        let mut visited = 0usize;
        for op in self.ops.iter().rev() {
            visited += 1;
            match op {
                Op::WarpMatch {
                    source,
                    target,
                    displacement,
                    warped,
                    weight,
                    ..
                } => {
                    if *weight == 0.0 {
                        continue;
                    }
                    let g: Vec<f64> = mse_grad(warped.values(), target.values(), &self.objective)
                        .into_iter()
                        .map(|v| v * weight)
                        .collect();
                    let gu = warp_displacement_vjp(source, self.value(*displacement), &g);
                    accumulate(&mut adj, *displacement, gu);
                }
                Op::Kl { posterior, weight } => {
                    if *weight == 0.0 {
                        continue;
                    }
                    let (g_mu, g_lv) = kl_grad(params.get(*posterior), &self.objective);
                    let slot = grads.get_mut(*posterior);
                    slot.mu.axpy(*weight, &g_mu);
                    slot.log_var.axpy(*weight, &g_lv);
                }
                Op::LinearCombination {
                    a,
                    a_weight,
                    b,
                    b_weight,
                    out,
                } => {
                    if let Some(g) = adj[out.0].take() {
                        accumulate(&mut adj, *a, g.scaled(*a_weight));
                        accumulate(&mut adj, *b, g.scaled(*b_weight));
                    }
                }
                Op::Merge { inputs, out } => {
                    if let Some(g) = adj[out.0].take() {
                        for (id, gc) in inputs.iter().zip(merge_chunks_adjoint(&g, self.layout)) {
                            accumulate(&mut adj, *id, gc);
                        }
                    }
                }
                Op::Upsample { input, coarse, out } => {
                    if let Some(g) = adj[out.0].take() {
                        accumulate(&mut adj, *input, upsample_adjoint(&g, *coarse));
                    }
                }
                Op::Exp { input, trace, out } => {
                    if let Some(g) = adj[out.0].take() {
                        accumulate(&mut adj, *input, exponentiate_backward(trace, &g));
                    }
                }
                Op::Sample {
                    posterior,
                    noise,
                    out,
                } => {
                    if let Some(g) = adj[out.0].take() {
                        let (g_mu, g_lv) = sample_velocity_vjp(params.get(*posterior), noise, &g);
                        let slot = grads.get_mut(*posterior);
                        slot.mu.axpy(1.0, &g_mu);
                        slot.log_var.axpy(1.0, &g_lv);
                    }
                }
            }
        }
        self.visited = Some(visited);
        Ok(grads)
    }
}
