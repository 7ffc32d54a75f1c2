//! Finite-group objective: latent blocks are permuted by a permutation group
//! and the best matching permutation is found per example.

use serde::{Deserialize, Serialize};

use super::hungarian;
use super::LossEval;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Largest degree for which the symmetric group is enumerated explicitly.
pub const MAX_ENUMERATED_DEGREE: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingStrategy {
    /// Minimize over every element of the permutation group.
    #[default]
    Enumerate,
    /// Optimal block matching; only valid for the full symmetric group.
    Assignment,
    /// Nearest-block matching averaged over both directions. A lower bound
    /// of the assignment cost.
    Chamfer,
}

/// How the permutation group is given in a config.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PermutationSpec {
    Symmetric,
    Cyclic,
    Explicit { elements: Vec<Vec<usize>> },
    Generated { generators: Vec<Vec<usize>> },
}

/// A permutation group on `0..degree`, validated to contain the identity
/// and be closed under composition and inverse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationGroup {
    degree: usize,
    elements: Vec<Vec<usize>>,
    symmetric: bool,
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

fn compose(p: &[usize], q: &[usize]) -> Vec<usize> {
    // (p . q)(x) = p(q(x))
    q.iter().map(|&x| p[x]).collect()
}

fn inverse(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &x) in p.iter().enumerate() {
        inv[x] = i;
    }
    inv
}

fn is_permutation(p: &[usize], degree: usize) -> bool {
    let mut seen = vec![false; degree];
    p.len() == degree
        && p.iter()
            .all(|&x| x < degree && !std::mem::replace(&mut seen[x], true))
}

fn all_permutations(degree: usize) -> Vec<Vec<usize>> {
    // Heap's algorithm would do; lexicographic order keeps output stable.
    let mut out = Vec::with_capacity(factorial(degree));
    let mut current: Vec<usize> = (0..degree).collect();
    loop {
        out.push(current.clone());
        // next lexicographic permutation
        let Some(i) = (1..degree).rev().find(|&i| current[i - 1] < current[i]) else {
            break;
        };
        let j = (i..degree).rev().find(|&j| current[j] > current[i - 1]).unwrap();
        current.swap(i - 1, j);
        current[i..].reverse();
    }
    out
}

impl PermutationGroup {
    pub fn symmetric(degree: usize) -> Result<Self> {
        if degree == 0 {
            return Err(Error::config("permutation degree must be positive"));
        }
        let elements = if degree <= MAX_ENUMERATED_DEGREE {
            all_permutations(degree)
        } else {
            Vec::new()
        };
        Ok(Self {
            degree,
            elements,
            symmetric: true,
        })
    }

    pub fn cyclic(degree: usize) -> Result<Self> {
        if degree == 0 {
            return Err(Error::config("permutation degree must be positive"));
        }
        let gen: Vec<usize> = (0..degree).map(|i| (i + 1) % degree).collect();
        Self::generated_by(degree, &[gen])
    }

    /// Closure of `generators` under composition.
    pub fn generated_by(degree: usize, generators: &[Vec<usize>]) -> Result<Self> {
        for g in generators {
            if !is_permutation(g, degree) {
                return Err(Error::config(format!(
                    "{g:?} is not a permutation of 0..{degree}"
                )));
            }
        }
        let mut elements = vec![(0..degree).collect::<Vec<_>>()];
        let mut frontier = elements.clone();
        while let Some(p) = frontier.pop() {
            for g in generators {
                let q = compose(g, &p);
                if !elements.contains(&q) {
                    if elements.len() >= factorial(MAX_ENUMERATED_DEGREE) {
                        return Err(Error::config("generated group is too large to enumerate"));
                    }
                    elements.push(q.clone());
                    frontier.push(q);
                }
            }
        }
        elements.sort();
        Self::from_elements(degree, elements)
    }

    pub fn from_elements(degree: usize, elements: Vec<Vec<usize>>) -> Result<Self> {
        if degree == 0 {
            return Err(Error::config("permutation degree must be positive"));
        }
        for p in &elements {
            if !is_permutation(p, degree) {
                return Err(Error::config(format!(
                    "{p:?} is not a permutation of 0..{degree}"
                )));
            }
        }
        let identity: Vec<usize> = (0..degree).collect();
        if !elements.contains(&identity) {
            return Err(Error::config("permutation set does not contain the identity"));
        }
        for p in &elements {
            if !elements.contains(&inverse(p)) {
                return Err(Error::config(format!(
                    "permutation set lacks the inverse of {p:?}"
                )));
            }
            for q in &elements {
                if !elements.contains(&compose(p, q)) {
                    return Err(Error::config(format!(
                        "permutation set is not closed: {p:?} . {q:?}"
                    )));
                }
            }
        }
        let symmetric = elements.len() == factorial(degree);
        Ok(Self {
            degree,
            elements,
            symmetric,
        })
    }

    pub fn from_spec(spec: &PermutationSpec, degree: usize) -> Result<Self> {
        match spec {
            PermutationSpec::Symmetric => Self::symmetric(degree),
            PermutationSpec::Cyclic => Self::cyclic(degree),
            PermutationSpec::Explicit { elements } => Self::from_elements(degree, elements.clone()),
            PermutationSpec::Generated { generators } => Self::generated_by(degree, generators),
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Explicit elements (empty for a symmetric group too large to list).
    pub fn elements(&self) -> &[Vec<usize>] {
        &self.elements
    }
}

/// Validated finite-group objective.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteGroupLoss {
    pub block_size: usize,
    pub group: PermutationGroup,
    pub strategy: MatchingStrategy,
}

impl FiniteGroupLoss {
    pub fn new(block_size: usize, group: PermutationGroup, strategy: MatchingStrategy) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::config("block size must be positive"));
        }
        match strategy {
            MatchingStrategy::Assignment if !group.is_symmetric() => {
                return Err(Error::config(
                    "assignment matching requires the full symmetric group",
                ))
            }
            MatchingStrategy::Enumerate if group.elements().is_empty() => {
                return Err(Error::config(format!(
                    "cannot enumerate the symmetric group of degree {}",
                    group.degree()
                )))
            }
            _ => {}
        }
        Ok(Self {
            block_size,
            group,
            strategy,
        })
    }

    pub fn block_count(&self) -> usize {
        self.group.degree()
    }

    pub fn dim(&self) -> usize {
        self.block_size * self.block_count()
    }
}

fn block_costs(z: &[f64], zt: &[f64], b: usize, m: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|a| {
            (0..m)
                .map(|c| {
                    z[a * b..(a + 1) * b]
                        .iter()
                        .zip(&zt[c * b..(c + 1) * b])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Cost of matching latent block `a` to transformed block `perm[a]`,
/// accumulated in block order.
pub fn permutation_cost(costs: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(a, &c)| costs[a][c]).sum()
}

/// `sum_i min_pi |z_i - pi . zt_i|^2` over aligned rows of `[B, n]` batches.
///
/// `grads[0]` is with respect to `z`, `grads[1]` with respect to `zt`.
pub fn finite_group_loss(z: &Tensor, zt: &Tensor, loss: &FiniteGroupLoss) -> Result<LossEval> {
    let (rows, n) = z.dims2()?;
    if zt.shape() != z.shape() {
        return Err(Error::shape(format!(
            "transformed batch {:?} does not match {:?}",
            zt.shape(),
            z.shape()
        )));
    }
    if n != loss.dim() {
        return Err(Error::shape(format!(
            "embedding dimension {n} is not {} blocks of {}",
            loss.block_count(),
            loss.block_size
        )));
    }
    let (b, m) = (loss.block_size, loss.block_count());
    let mut gz = vec![0.0; z.len()];
    let mut gzt = vec![0.0; zt.len()];
    let mut value = 0.0;

    // d/dz_a |z_a - zt_c|^2 = 2 (z_a - zt_c), and the negative for zt_c
    let mut pull = |row: usize, a: usize, c: usize, weight: f64| {
        let (za, zc) = (row * n + a * b, row * n + c * b);
        for t in 0..b {
            let d = 2.0 * weight * (z.data()[za + t] - zt.data()[zc + t]);
            gz[za + t] += d;
            gzt[zc + t] -= d;
        }
    };

    for row in 0..rows {
        let costs = block_costs(z.row(row), zt.row(row), b, m);
        match loss.strategy {
            MatchingStrategy::Enumerate | MatchingStrategy::Assignment => {
                let best = if loss.strategy == MatchingStrategy::Enumerate {
                    let mut best = &loss.group.elements()[0];
                    let mut best_cost = permutation_cost(&costs, best);
                    for p in &loss.group.elements()[1..] {
                        let c = permutation_cost(&costs, p);
                        if c < best_cost {
                            best = p;
                            best_cost = c;
                        }
                    }
                    best.clone()
                } else {
                    hungarian::solve(&costs)
                };
                value += permutation_cost(&costs, &best);
                for (a, &c) in best.iter().enumerate() {
                    pull(row, a, c, 1.0);
                }
            }
            MatchingStrategy::Chamfer => {
                let mut acc = 0.0;
                for a in 0..m {
                    let c = argmin((0..m).map(|c| costs[a][c]));
                    acc += costs[a][c];
                    pull(row, a, c, 0.5);
                }
                for c in 0..m {
                    let a = argmin((0..m).map(|a| costs[a][c]));
                    acc += costs[a][c];
                    pull(row, a, c, 0.5);
                }
                value += 0.5 * acc;
            }
        }
    }
    Ok(LossEval {
        value,
        grads: vec![gz, gzt],
        skipped: 0,
    })
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}
