//! Finite-difference checks of every training loss, back-propagated through
//! a small encoder to its parameters.
//!
//! The analytic route records the loss on a tape and runs the backward pass;
//! the numeric route evaluates the loss value with plain forward passes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{check, DEFAULT_STEP};
use crate::autodiff::{Activation, EncoderModel, Graph, Tensor, Var};
use crate::decomposition::{
    active_loss, active_loss_on, embed_stack, passive_loss, passive_loss_on, Block, DecompositionMode,
    DecompositionSpec,
};
use crate::env::{SubgroupBatch, TransformBatch};
use crate::error::{Error, Result};
use crate::objectives::{
    barrier_terms, informed_loss, informed_loss_on, invariant_feature_loss, BarrierKind, GroupObjective,
    InformedTriple, LatentAction, MatchingStrategy, PermutationSpec, Reduction,
};

pub const DEFAULT_INSTANCES: usize = 20;
pub const TOLERANCE: f64 = 1e-4;

const INPUT: usize = 3;
const HIDDEN: usize = 5;
const BATCH: usize = 4;
const TRANSFORMS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedLoss {
    Hinge,
    Reciprocal,
    LogBarrier,
    Informed,
    FiniteEnumerate,
    FiniteAssignment,
    FiniteChamfer,
    Euclidean,
    Orthogonal,
    Unitary,
    Conformal,
    Invariance,
    Active,
    Passive,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 14] = [
        CheckedLoss::Hinge,
        CheckedLoss::Reciprocal,
        CheckedLoss::LogBarrier,
        CheckedLoss::Informed,
        CheckedLoss::FiniteEnumerate,
        CheckedLoss::FiniteAssignment,
        CheckedLoss::FiniteChamfer,
        CheckedLoss::Euclidean,
        CheckedLoss::Orthogonal,
        CheckedLoss::Unitary,
        CheckedLoss::Conformal,
        CheckedLoss::Invariance,
        CheckedLoss::Active,
        CheckedLoss::Passive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::Hinge => "hinge",
            CheckedLoss::Reciprocal => "reciprocal",
            CheckedLoss::LogBarrier => "log_barrier",
            CheckedLoss::Informed => "informed",
            CheckedLoss::FiniteEnumerate => "finite_enumerate",
            CheckedLoss::FiniteAssignment => "finite_assignment",
            CheckedLoss::FiniteChamfer => "finite_chamfer",
            CheckedLoss::Euclidean => "euclidean",
            CheckedLoss::Orthogonal => "orthogonal",
            CheckedLoss::Unitary => "unitary",
            CheckedLoss::Conformal => "conformal",
            CheckedLoss::Invariance => "invariance",
            CheckedLoss::Active => "active",
            CheckedLoss::Passive => "passive",
        }
    }

    fn latent_dim(self) -> usize {
        match self {
            CheckedLoss::FiniteEnumerate | CheckedLoss::FiniteAssignment | CheckedLoss::FiniteChamfer => 6,
            CheckedLoss::Unitary | CheckedLoss::Active | CheckedLoss::Passive => 4,
            _ => 3,
        }
    }
}

impl fmt::Display for CheckedLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckedLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::config(format!("unknown loss {s:?}")))
    }
}

/// Parses a comma-separated list, where `all` selects every loss.
pub fn parse_losses(list: &str) -> Result<Vec<CheckedLoss>> {
    if list.trim() == "all" {
        return Ok(CheckedLoss::ALL.to_vec());
    }
    list.split(',').map(|s| s.trim().parse()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientCheck {
    pub loss: CheckedLoss,
    pub instances: usize,
    pub max_relative_error: f64,
}

impl GradientCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

fn flat(model: &EncoderModel) -> Vec<f64> {
    model
        .params()
        .iter()
        .flat_map(|p| p.data().iter().copied())
        .collect()
}

fn with_params(model: &EncoderModel, values: &[f64]) -> EncoderModel {
    let mut m = model.clone();
    let mut at = 0;
    for p in m.params_mut() {
        let n = p.len();
        p.data_mut().copy_from_slice(&values[at..at + n]);
        at += n;
    }
    m
}

fn uniform(rng: &mut ChaCha8Rng, count: usize) -> Vec<f64> {
    (0..count).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_batch(rng: &mut ChaCha8Rng) -> Result<TransformBatch> {
    TransformBatch::new(
        Tensor::new(vec![BATCH, INPUT], uniform(rng, BATCH * INPUT))?,
        Tensor::new(
            vec![TRANSFORMS, BATCH, INPUT],
            uniform(rng, TRANSFORMS * BATCH * INPUT),
        )?,
    )
}

fn stack(model: &EncoderModel, batch: &TransformBatch) -> Result<Tensor> {
    model
        .forward(&batch.stacked())?
        .reshape(vec![TRANSFORMS + 1, BATCH, model.output_dim()])
}

/// A loss instance: tape route and value route over the same data.
struct Instance {
    tape: Box<dyn Fn(&mut Graph, &EncoderModel, &[Var]) -> Result<Var>>,
    value: Box<dyn Fn(&EncoderModel) -> Result<f64>>,
}

fn stack_instance(objective: GroupObjective, batch: TransformBatch) -> Instance {
    let obj = objective.clone();
    let b = batch.clone();
    Instance {
        tape: Box::new(move |g, m, p| {
            let z = embed_stack(g, m, p, &b)?;
            obj.stack_loss_on(g, z, &mut ChaCha8Rng::seed_from_u64(0))
        }),
        value: Box::new(move |m| {
            Ok(objective
                .stack_loss(&stack(m, &batch)?, &mut ChaCha8Rng::seed_from_u64(0))?
                .value)
        }),
    }
}

fn barrier_instance(kind: BarrierKind, batch: TransformBatch) -> Instance {
    let base = batch.base.clone();
    Instance {
        tape: Box::new(move |g, m, p| {
            let x = g.constant(batch.base.clone());
            let z = m.forward_on(g, p, x)?;
            let eval = barrier_terms(g.value(z), kind, Reduction::Sum)?;
            g.fused(&[z], eval.value, eval.grads)
        }),
        value: Box::new(move |m| Ok(barrier_terms(&m.forward(&base)?, kind, Reduction::Sum)?.value)),
    }
}

fn finite(strategy: MatchingStrategy) -> GroupObjective {
    GroupObjective::Finite {
        block_size: 2,
        block_count: 3,
        permutations: PermutationSpec::Symmetric,
        strategy,
    }
}

fn two_blocks(mode: DecompositionMode, objective: GroupObjective) -> DecompositionSpec {
    let mut spec = DecompositionSpec::new(
        vec![
            Block {
                dim: 2,
                objective: objective.clone(),
            },
            Block { dim: 2, objective },
        ],
        mode,
    );
    spec.invariance_weight = 0.7;
    spec
}

fn instance(loss: CheckedLoss, rng: &mut ChaCha8Rng, n: usize) -> Result<Instance> {
    let batch = random_batch(rng)?;
    Ok(match loss {
        CheckedLoss::Hinge => barrier_instance(BarrierKind::Hinge { epsilon: 1.0 }, batch),
        CheckedLoss::Reciprocal => barrier_instance(BarrierKind::Reciprocal, batch),
        CheckedLoss::LogBarrier => barrier_instance(BarrierKind::LogBarrier, batch),
        CheckedLoss::Informed => {
            let actions: Vec<LatentAction> = (0..2)
                .map(|e| LatentAction {
                    element: e,
                    matrix: (0..n).map(|_| uniform(rng, n)).collect(),
                })
                .collect();
            let triples: Vec<InformedTriple> = (0..BATCH)
                .map(|i| InformedTriple {
                    x: uniform(rng, INPUT),
                    element: (i % 2) as u32,
                    x_t: uniform(rng, INPUT),
                })
                .collect();
            let (t2, a2) = (triples.clone(), actions.clone());
            Instance {
                tape: Box::new(move |g, m, p| informed_loss_on(g, m, p, &triples, &actions)),
                value: Box::new(move |m| informed_loss(m, &t2, &a2)),
            }
        }
        CheckedLoss::FiniteEnumerate => stack_instance(finite(MatchingStrategy::Enumerate), batch),
        CheckedLoss::FiniteAssignment => stack_instance(finite(MatchingStrategy::Assignment), batch),
        CheckedLoss::FiniteChamfer => stack_instance(finite(MatchingStrategy::Chamfer), batch),
        CheckedLoss::Euclidean => stack_instance(GroupObjective::euclidean(), batch),
        CheckedLoss::Orthogonal => stack_instance(
            GroupObjective::Orthogonal {
                include_diagonal: true,
                reduction: Reduction::Mean,
            },
            batch,
        ),
        CheckedLoss::Unitary => stack_instance(
            GroupObjective::Unitary {
                include_diagonal: true,
                reduction: Reduction::Mean,
            },
            batch,
        ),
        CheckedLoss::Conformal => stack_instance(
            GroupObjective::Conformal {
                max_triples: 4096,
                reduction: Reduction::Mean,
            },
            batch,
        ),
        CheckedLoss::Invariance => {
            let b = batch.clone();
            Instance {
                tape: Box::new(move |g, m, p| {
                    let z = embed_stack(g, m, p, &b)?;
                    let eval = invariant_feature_loss(g.value(z), Reduction::Mean)?;
                    g.fused(&[z], eval.value, eval.grads)
                }),
                value: Box::new(move |m| {
                    Ok(invariant_feature_loss(&stack(m, &batch)?, Reduction::Mean)?.value)
                }),
            }
        }
        CheckedLoss::Passive => {
            let spec = two_blocks(DecompositionMode::Passive, GroupObjective::euclidean());
            let (s2, b) = (spec.clone(), batch.clone());
            Instance {
                tape: Box::new(move |g, m, p| {
                    let z = embed_stack(g, m, p, &b)?;
                    passive_loss_on(g, z, &spec, &mut ChaCha8Rng::seed_from_u64(0))
                }),
                value: Box::new(move |m| passive_loss(m, &batch, &s2, &mut ChaCha8Rng::seed_from_u64(0))),
            }
        }
        CheckedLoss::Active => {
            let spec = two_blocks(DecompositionMode::Active, GroupObjective::euclidean());
            let batches = vec![
                SubgroupBatch { subgroup: 0, batch },
                SubgroupBatch {
                    subgroup: 1,
                    batch: random_batch(rng)?,
                },
            ];
            let (s2, b2) = (spec.clone(), batches.clone());
            Instance {
                tape: Box::new(move |g, m, p| {
                    let mut stacks = Vec::new();
                    for sb in &batches {
                        stacks.push((sb.subgroup, embed_stack(g, m, p, &sb.batch)?));
                    }
                    Ok(active_loss_on(g, &stacks, &spec, &mut ChaCha8Rng::seed_from_u64(0))?.total)
                }),
                value: Box::new(move |m| active_loss(m, &b2, &s2, &mut ChaCha8Rng::seed_from_u64(0))),
            }
        }
    })
}

/// Largest relative gradient error of `loss` over `instances` seeded random
/// instances.
pub fn check_loss(loss: CheckedLoss, instances: usize, seed: u64) -> Result<GradientCheck> {
    let index = CheckedLoss::ALL.iter().position(|l| *l == loss).expect("listed") as u64;
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index << 32 | i as u64);
        let n = loss.latent_dim();
        let model = EncoderModel::new(vec![INPUT, HIDDEN, n], vec![Activation::Elu], seed, &mut rng)?;
        let inst = instance(loss, &mut rng, n)?;

        let mut graph = Graph::new();
        let params = model.bind(&mut graph);
        let out = (inst.tape)(&mut graph, &model, &params)?;
        graph.backward(out)?;
        let analytic: Vec<f64> = params
            .iter()
            .zip(model.params())
            .flat_map(|(v, p)| graph.grad(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
            .collect();
        let err = check(
            |x| (inst.value)(&with_params(&model, x)),
            &flat(&model),
            &analytic,
            DEFAULT_STEP,
        )?;
        if err >= TOLERANCE {
            log::warn!("{loss} instance {i}: relative error {err:.3e}");
        }
        worst = worst.max(err);
    }
    Ok(GradientCheck {
        loss,
        instances,
        max_relative_error: worst,
    })
}

pub fn check_losses(losses: &[CheckedLoss], instances: usize, seed: u64) -> Result<Vec<GradientCheck>> {
    losses.iter().map(|&l| check_loss(l, instances, seed)).collect()
}
