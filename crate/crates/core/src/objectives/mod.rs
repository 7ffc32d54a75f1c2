//! Symmetry-regularization losses and injectivity barriers.
//!
//! Every loss returns a [`LossEval`] holding its value and analytic partial
//! derivatives, which [`Graph::fused`] splices into the tape.

mod barrier;
mod conformal;
mod finite;
pub mod hungarian;
mod induced;
mod informed;
mod invariant;
mod pairwise;

pub use barrier::{barrier_terms, injectivity_loss, BarrierKind, BarrierSpec};
pub use conformal::{conformal_loss, cosine_angle, Triple, TripleSet, DEFAULT_MAX_TRIPLES};
pub use finite::{
    finite_group_loss, permutation_cost, FiniteGroupLoss, MatchingStrategy, PermutationGroup,
    PermutationSpec, MAX_ENUMERATED_DEGREE,
};
pub use induced::{verify_induced_action, ActionTable, InducedActionReport, Violation};
pub use informed::{
    informed_loss, informed_loss_on, informed_terms, validate_actions, InformedTriple, LatentAction,
};
pub use invariant::invariant_feature_loss;
pub(crate) use pairwise::check_slices;
pub use pairwise::{euclidean_loss, orthogonal_loss, InnerProductOptions};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Smallest distance or norm used in a denominator or logarithm.
pub const DISTANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Divide by the number of compared terms.
    #[default]
    Mean,
    Sum,
}

/// Value of a loss with its partial derivatives, one buffer per input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
    /// Terms dropped or clamped as degenerate.
    pub skipped: usize,
}

impl LossEval {
    pub fn single(value: f64, grad: Vec<f64>) -> Self {
        Self {
            value,
            grads: vec![grad],
            skipped: 0,
        }
    }

    pub fn reduce(self, reduction: Reduction, terms: usize) -> Self {
        match reduction {
            Reduction::Mean if terms > 0 => self.scaled(1.0 / terms as f64),
            _ => self,
        }
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.value *= c;
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= c);
        }
        self
    }

    /// Gradient of a single-input loss.
    pub fn grad(&self) -> &[f64] {
        &self.grads[0]
    }
}

fn default_true() -> bool {
    true
}

fn default_max_triples() -> usize {
    DEFAULT_MAX_TRIPLES
}

fn symmetric_spec() -> PermutationSpec {
    PermutationSpec::Symmetric
}

/// Which symmetry-regularization loss applies, with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GroupObjective {
    Informed {
        actions: Vec<LatentAction>,
    },
    Finite {
        block_size: usize,
        block_count: usize,
        #[serde(default = "symmetric_spec")]
        permutations: PermutationSpec,
        #[serde(default)]
        strategy: MatchingStrategy,
    },
    Euclidean {
        #[serde(default)]
        reduction: Reduction,
    },
    Orthogonal {
        #[serde(default = "default_true")]
        include_diagonal: bool,
        #[serde(default)]
        reduction: Reduction,
    },
    Unitary {
        #[serde(default = "default_true")]
        include_diagonal: bool,
        #[serde(default)]
        reduction: Reduction,
    },
    Conformal {
        #[serde(default = "default_max_triples")]
        max_triples: usize,
        #[serde(default)]
        reduction: Reduction,
    },
}

impl GroupObjective {
    pub fn euclidean() -> Self {
        GroupObjective::Euclidean {
            reduction: Reduction::Mean,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GroupObjective::Informed { .. } => "informed",
            GroupObjective::Finite { .. } => "finite",
            GroupObjective::Euclidean { .. } => "euclidean",
            GroupObjective::Orthogonal { .. } => "orthogonal",
            GroupObjective::Unitary { .. } => "unitary",
            GroupObjective::Conformal { .. } => "conformal",
        }
    }

    /// Checks that the objective admits an embedding of dimension `dim`.
    pub fn validate(&self, dim: usize) -> Result<()> {
        if dim == 0 {
            return Err(Error::config("objective attached to a zero-dimensional block"));
        }
        match self {
            GroupObjective::Informed { actions } => validate_actions(actions, dim),
            GroupObjective::Finite { .. } => {
                let loss = self.finite()?;
                if loss.dim() != dim {
                    return Err(Error::config(format!(
                        "finite objective covers {} dimensions, block has {dim}",
                        loss.dim()
                    )));
                }
                Ok(())
            }
            GroupObjective::Unitary { .. } if !dim.is_multiple_of(2) => Err(Error::config(format!(
                "unitary objective needs an even dimension, got {dim}"
            ))),
            GroupObjective::Conformal { max_triples, .. } if *max_triples == 0 => {
                Err(Error::config("conformal triple cap must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn finite(&self) -> Result<FiniteGroupLoss> {
        match self {
            GroupObjective::Finite {
                block_size,
                block_count,
                permutations,
                strategy,
            } => {
                let group = PermutationGroup::from_spec(permutations, *block_count)?;
                FiniteGroupLoss::new(*block_size, group, *strategy)
            }
            other => Err(Error::config(format!(
                "{} objective is not a finite-group objective",
                other.name()
            ))),
        }
    }

    /// Evaluates the objective on a `[K + 1, B, n]` stack whose slice 0 holds
    /// the base embeddings. `rng` drives conformal triple sampling only.
    pub fn stack_loss<R: Rng + ?Sized>(&self, z_all: &Tensor, rng: &mut R) -> Result<LossEval> {
        match self {
            GroupObjective::Informed { .. } => Err(Error::config(
                "the informed objective needs labelled triples, not an unlabelled batch",
            )),
            GroupObjective::Finite { .. } => finite_stack_loss(z_all, &self.finite()?),
            GroupObjective::Euclidean { reduction } => euclidean_loss(z_all, *reduction),
            GroupObjective::Orthogonal {
                include_diagonal,
                reduction,
            } => orthogonal_loss(
                z_all,
                InnerProductOptions {
                    unitary: false,
                    include_diagonal: *include_diagonal,
                    reduction: *reduction,
                },
            ),
            GroupObjective::Unitary {
                include_diagonal,
                reduction,
            } => orthogonal_loss(
                z_all,
                InnerProductOptions {
                    unitary: true,
                    include_diagonal: *include_diagonal,
                    reduction: *reduction,
                },
            ),
            GroupObjective::Conformal {
                max_triples,
                reduction,
            } => {
                let (_, b, _) = check_slices(z_all, 3)?;
                let triples = TripleSet::sample(b, *max_triples, rng)?;
                conformal_loss(z_all, &triples, *reduction)
            }
        }
    }

    /// Records [`GroupObjective::stack_loss`] of the stack `z_all` onto `graph`.
    pub fn stack_loss_on<R: Rng + ?Sized>(&self, graph: &mut Graph, z_all: Var, rng: &mut R) -> Result<Var> {
        let eval = self.stack_loss(graph.value(z_all), rng)?;
        graph.fused(&[z_all], eval.value, eval.grads)
    }
}

/// Finite-group loss of every transformed slice against the base slice.
pub fn finite_stack_loss(z_all: &Tensor, loss: &FiniteGroupLoss) -> Result<LossEval> {
    let (s, b, n) = check_slices(z_all, 1)?;
    let base = Tensor::new(vec![b, n], z_all.data()[..b * n].to_vec())?;
    let mut grad = vec![0.0; z_all.len()];
    let mut value = 0.0;
    for k in 1..s {
        let moved = Tensor::new(vec![b, n], z_all.data()[k * b * n..(k + 1) * b * n].to_vec())?;
        let eval = finite_group_loss(&base, &moved, loss)?;
        value += eval.value;
        for (g, d) in grad[..b * n].iter_mut().zip(&eval.grads[0]) {
            *g += d;
        }
        for (g, d) in grad[k * b * n..(k + 1) * b * n].iter_mut().zip(&eval.grads[1]) {
            *g += d;
        }
    }
    Ok(LossEval::single(value, grad))
}

/// Records `loss_fn(value(x))` on the tape as a single fused node.
pub fn fused_loss(
    graph: &mut Graph,
    x: Var,
    loss_fn: impl FnOnce(&Tensor) -> Result<LossEval>,
) -> Result<Var> {
    let eval = loss_fn(graph.value(x))?;
    graph.fused(&[x], eval.value, eval.grads)
}
