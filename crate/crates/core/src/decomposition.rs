//! Objectives over a product of groups: the embedding is split into blocks
//! and each block carries its own group objective.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{EncoderModel, Graph, Tensor, Var};
use crate::env::{SubgroupBatch, TransformBatch};
use crate::error::{Error, Result};
use crate::objectives::{fused_loss, invariant_feature_loss, GroupObjective, Reduction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecompositionMode {
    /// Each subgroup is observed in isolation.
    Active,
    /// Only jointly transformed data is available.
    Passive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub dim: usize,
    pub objective: GroupObjective,
}

fn default_weight() -> f64 {
    1.0
}

fn default_invariance_reduction() -> Reduction {
    Reduction::Sum
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionSpec {
    pub blocks: Vec<Block>,
    pub mode: DecompositionMode,
    /// Weight of the cross-subgroup invariance term (active mode only).
    #[serde(default = "default_weight")]
    pub invariance_weight: f64,
    #[serde(default = "default_invariance_reduction")]
    pub invariance_reduction: Reduction,
}

impl DecompositionSpec {
    pub fn new(blocks: Vec<Block>, mode: DecompositionMode) -> Self {
        Self {
            blocks,
            mode,
            invariance_weight: 1.0,
            invariance_reduction: Reduction::Sum,
        }
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim).sum()
    }

    pub fn ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.blocks
            .iter()
            .map(|b| {
                start += b.dim;
                start - b.dim..start
            })
            .collect()
    }

    pub fn validate(&self, output_dim: usize) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::config("a decomposition needs at least one block"));
        }
        if self.dim() != output_dim {
            return Err(Error::config(format!(
                "blocks cover {} dimensions, encoder outputs {output_dim}",
                self.dim()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.objective
                .validate(b.dim)
                .map_err(|e| Error::config(format!("block {i}: {e}")))?;
        }
        if !(self.invariance_weight.is_finite() && self.invariance_weight >= 0.0) {
            return Err(Error::config("invariance weight must be finite and non-negative"));
        }
        Ok(())
    }

    fn require(&self, mode: DecompositionMode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::config(format!(
                "{:?} loss requested for a {:?} decomposition",
                mode, self.mode
            )));
        }
        Ok(())
    }
}

fn sum_vars(graph: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut total = *vars.first().ok_or_else(|| Error::contract("nothing to sum"))?;
    for &v in &vars[1..] {
        total = graph.add(total, v)?;
    }
    Ok(total)
}

/// Embeds a batch and returns its `[K + 1, B, n]` stack.
pub fn embed_stack(
    graph: &mut Graph,
    model: &EncoderModel,
    params: &[Var],
    batch: &TransformBatch,
) -> Result<Var> {
    let x = graph.constant(batch.stacked());
    let z = model.forward_on(graph, params, x)?;
    graph.reshape(
        z,
        vec![batch.transforms() + 1, batch.batch_size(), model.output_dim()],
    )
}

/// Per-block objectives on one stack, each on its own slice of the last axis.
pub fn passive_loss_on<R: Rng + ?Sized>(
    graph: &mut Graph,
    z_all: Var,
    spec: &DecompositionSpec,
    rng: &mut R,
) -> Result<Var> {
    spec.require(DecompositionMode::Passive)?;
    let mut terms = Vec::with_capacity(spec.blocks.len());
    for (block, range) in spec.blocks.iter().zip(spec.ranges()) {
        let slice = graph.narrow_last(z_all, range.start, range.end)?;
        terms.push(block.objective.stack_loss_on(graph, slice, rng)?);
    }
    sum_vars(graph, &terms)
}

/// Symmetry and weighted invariance parts of the active objective.
#[derive(Clone, Copy, Debug)]
pub struct ActiveTerms {
    pub symmetry: Var,
    /// Unweighted; the total adds `invariance_weight * invariance`.
    pub invariance: Var,
    pub total: Var,
}

/// Active objective over stacks tagged with the subgroup that produced them.
///
/// For a batch of subgroup `i`, block `i` carries its group objective and
/// every other block `j` is penalized by `|f_j(x) - f_j(t(g, x))|^2`.
pub fn active_loss_on<R: Rng + ?Sized>(
    graph: &mut Graph,
    stacks: &[(usize, Var)],
    spec: &DecompositionSpec,
    rng: &mut R,
) -> Result<ActiveTerms> {
    spec.require(DecompositionMode::Active)?;
    let ranges = spec.ranges();
    let mut symmetry = Vec::new();
    let mut invariance = Vec::new();
    for &(i, z_all) in stacks {
        if i >= spec.blocks.len() {
            return Err(Error::config(format!(
                "batch for subgroup {i} but only {} blocks",
                spec.blocks.len()
            )));
        }
        for (j, range) in ranges.iter().enumerate() {
            let slice = graph.narrow_last(z_all, range.start, range.end)?;
            if j == i {
                symmetry.push(spec.blocks[i].objective.stack_loss_on(graph, slice, rng)?);
            } else {
                let red = spec.invariance_reduction;
                invariance.push(fused_loss(graph, slice, |z| invariant_feature_loss(z, red))?);
            }
        }
    }
    let symmetry = sum_vars(graph, &symmetry)?;
    let invariance = if invariance.is_empty() {
        graph.constant(Tensor::scalar(0.0))
    } else {
        sum_vars(graph, &invariance)?
    };
    let weighted = graph.scale(invariance, spec.invariance_weight);
    let total = graph.add(symmetry, weighted)?;
    Ok(ActiveTerms {
        symmetry,
        invariance,
        total,
    })
}

/// Value of the passive objective for a fixed model.
pub fn passive_loss<R: Rng + ?Sized>(
    model: &EncoderModel,
    batch: &TransformBatch,
    spec: &DecompositionSpec,
    rng: &mut R,
) -> Result<f64> {
    let mut graph = Graph::new();
    let params = model.bind_frozen(&mut graph);
    let z = embed_stack(&mut graph, model, &params, batch)?;
    let loss = passive_loss_on(&mut graph, z, spec, rng)?;
    Ok(graph.scalar(loss))
}

/// Value of the active objective for a fixed model.
pub fn active_loss<R: Rng + ?Sized>(
    model: &EncoderModel,
    batches: &[SubgroupBatch],
    spec: &DecompositionSpec,
    rng: &mut R,
) -> Result<f64> {
    let mut graph = Graph::new();
    let params = model.bind_frozen(&mut graph);
    let mut stacks = Vec::with_capacity(batches.len());
    for b in batches {
        stacks.push((b.subgroup, embed_stack(&mut graph, model, &params, &b.batch)?));
    }
    let terms = active_loss_on(&mut graph, &stacks, spec, rng)?;
    Ok(graph.scalar(terms.total))
}

/// Running mean and summed squared deviation of vectors (Welford).
#[derive(Clone, Debug)]
struct Welford {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    /// Trace of the population covariance.
    fn total_variance(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        self.m2.iter().sum::<f64>() / self.count as f64
    }
}

/// Entry `(i, j)`: mean squared displacement of block `i` under subgroup-`j`
/// transformations divided by the total variance of block `i` over every
/// embedding in `stacks`. Each stack is `[K + 1, B, n]` with slice 0 the
/// untransformed batch.
pub fn invariance_score_from_stacks(
    stacks: &[(usize, Tensor)],
    ranges: &[Range<usize>],
    subgroups: usize,
) -> Result<Vec<Vec<f64>>> {
    let blocks = ranges.len();
    let mut disp = vec![vec![0.0; subgroups]; blocks];
    let mut counts = vec![0usize; subgroups];
    let mut var: Vec<Welford> = ranges.iter().map(|r| Welford::new(r.len())).collect();
    for (j, z) in stacks {
        let (s, b, n) = z.dims3()?;
        if *j >= subgroups {
            return Err(Error::config(format!("stack for subgroup {j} of {subgroups}")));
        }
        if ranges.last().map_or(0, |r| r.end) > n {
            return Err(Error::shape("block ranges exceed the embedding dimension"));
        }
        let row = |k: usize, p: usize| &z.data()[(k * b + p) * n..(k * b + p + 1) * n];
        for k in 0..s {
            for p in 0..b {
                for (w, r) in var.iter_mut().zip(ranges) {
                    w.push(&row(k, p)[r.clone()]);
                }
            }
        }
        for k in 1..s {
            for p in 0..b {
                for (i, r) in ranges.iter().enumerate() {
                    disp[i][*j] += row(k, p)[r.clone()]
                        .iter()
                        .zip(&row(0, p)[r.clone()])
                        .map(|(a, c)| (a - c) * (a - c))
                        .sum::<f64>();
                }
            }
        }
        counts[*j] += (s - 1) * b;
    }
    let mut scores = vec![vec![f64::NAN; subgroups]; blocks];
    for i in 0..blocks {
        let v = var[i].total_variance();
        if !(v > 0.0) {
            log::warn!("block {i} has zero variance over the evaluation set; scores are NaN");
            continue;
        }
        for j in 0..subgroups {
            if counts[j] > 0 {
                scores[i][j] = disp[i][j] / counts[j] as f64 / v;
            }
        }
    }
    Ok(scores)
}

/// [`invariance_score_from_stacks`] on the embeddings of `model`.
pub fn invariance_score(
    model: &EncoderModel,
    batches: &[SubgroupBatch],
    spec: &DecompositionSpec,
) -> Result<Vec<Vec<f64>>> {
    spec.validate(model.output_dim())?;
    let mut stacks = Vec::with_capacity(batches.len());
    for b in batches {
        let z = model.forward(&b.batch.stacked())?;
        let z = z.reshape(vec![
            b.batch.transforms() + 1,
            b.batch.batch_size(),
            model.output_dim(),
        ])?;
        stacks.push((b.subgroup, z));
    }
    invariance_score_from_stacks(&stacks, &spec.ranges(), spec.blocks.len())
}
