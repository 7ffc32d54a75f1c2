//! Distance- and inner-product-preservation objectives.
//!
//! Both compare a pairwise quantity `q(k, i, j)` across every unordered pair
//! of transformation slices `a < b` (slice 0 being the untransformed batch):
//!
//! ```text
//! sum_{i<j} sum_{a<b} (q(a,i,j) - q(b,i,j))^2
//! ```
//!
//! The inner sum is evaluated as `S * sum_a (q_a - mean(q))^2` with `S` the
//! slice count, which is exact, non-negative, and linear in `S`.

use serde::{Deserialize, Serialize};

use super::{LossEval, Reduction, DISTANCE_FLOOR};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Accumulates `S * sum (q_a - mean)^2` for one point pair and returns its
/// derivative with respect to each `q_a` in `dq`.
fn spread(q: &[f64], dq: &mut [f64]) -> f64 {
    let s = q.len() as f64;
    let mean = q.iter().sum::<f64>() / s;
    let mut acc = 0.0;
    for (d, &qa) in dq.iter_mut().zip(q) {
        let c = qa - mean;
        acc += c * c;
        *d = 2.0 * s * c;
    }
    s * acc
}

pub(crate) fn check_slices(z_all: &Tensor, min_points: usize) -> Result<(usize, usize, usize)> {
    let (s, b, n) = z_all.dims3()?;
    if s < 2 {
        return Err(Error::contract(format!(
            "need the base slice plus at least one transformation, got {s} slices"
        )));
    }
    if b < min_points {
        return Err(Error::contract(format!(
            "need at least {min_points} points per slice, got {b}"
        )));
    }
    if n == 0 {
        return Err(Error::shape("embedding dimension is zero"));
    }
    Ok((s, b, n))
}

/// Distance-preservation loss over a `[K + 1, B, n]` stack of embeddings.
pub fn euclidean_loss(z_all: &Tensor, reduction: Reduction) -> Result<LossEval> {
    let (s, b, n) = check_slices(z_all, 2)?;
    let z = z_all.data();
    let at = |k: usize, i: usize| &z[(k * b + i) * n..(k * b + i + 1) * n];

    let mut grad = vec![0.0; z.len()];
    let mut value = 0.0;
    let mut d = vec![0.0; s];
    let mut dd = vec![0.0; s];
    let mut diffs = vec![0.0; s * n];

    for i in 0..b {
        for j in i + 1..b {
            for k in 0..s {
                let (zi, zj) = (at(k, i), at(k, j));
                let mut sq = 0.0;
                for t in 0..n {
                    let df = zi[t] - zj[t];
                    diffs[k * n + t] = df;
                    sq += df * df;
                }
                d[k] = sq.sqrt();
            }
            value += spread(&d, &mut dd);
            for k in 0..s {
                if d[k] < DISTANCE_FLOOR {
                    continue;
                }
                let scale = dd[k] / d[k];
                let (gi, gj) = ((k * b + i) * n, (k * b + j) * n);
                for t in 0..n {
                    let g = scale * diffs[k * n + t];
                    grad[gi + t] += g;
                    grad[gj + t] -= g;
                }
            }
        }
    }

    let terms = b * (b - 1) / 2 * (s * (s - 1) / 2);
    Ok(LossEval::single(value, grad).reduce(reduction, terms))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerProductOptions {
    /// Interpret rows as complex vectors `(re | im)` and compare the full
    /// Hermitian inner product.
    #[serde(default)]
    pub unitary: bool,
    /// Include `i == j` terms, which pin the norm of each embedding.
    #[serde(default = "default_true")]
    pub include_diagonal: bool,
    #[serde(default)]
    pub reduction: Reduction,
}

fn default_true() -> bool {
    true
}

impl Default for InnerProductOptions {
    fn default() -> Self {
        Self {
            unitary: false,
            include_diagonal: true,
            reduction: Reduction::Mean,
        }
    }
}

/// Inner-product-preservation loss (orthogonal group, or unitary group when
/// `opts.unitary` is set).
pub fn orthogonal_loss(z_all: &Tensor, opts: InnerProductOptions) -> Result<LossEval> {
    let min_points = if opts.include_diagonal { 1 } else { 2 };
    let (s, b, n) = check_slices(z_all, min_points)?;
    if opts.unitary && n % 2 != 0 {
        return Err(Error::config(format!(
            "unitary objective needs an even embedding dimension, got {n}"
        )));
    }
    let h = n / 2;
    let z = z_all.data();
    let row = |k: usize, i: usize| (k * b + i) * n;

    let mut grad = vec![0.0; z.len()];
    let mut value = 0.0;
    let mut re = vec![0.0; s];
    let mut im = vec![0.0; s];
    let mut dre = vec![0.0; s];
    let mut dim = vec![0.0; s];
    let mut pairs = 0usize;

    for i in 0..b {
        let first = if opts.include_diagonal { i } else { i + 1 };
        for j in first..b {
            pairs += 1;
            for k in 0..s {
                let (zi, zj) = (&z[row(k, i)..row(k, i) + n], &z[row(k, j)..row(k, j) + n]);
                re[k] = zi.iter().zip(zj).map(|(x, y)| x * y).sum();
                if opts.unitary && i != j {
                    let (ai, bi) = zi.split_at(h);
                    let (aj, bj) = zj.split_at(h);
                    let mut acc = 0.0;
                    for t in 0..h {
                        acc += ai[t] * bj[t] - bi[t] * aj[t];
                    }
                    im[k] = acc;
                }
            }
            value += spread(&re, &mut dre);
            if opts.unitary && i != j {
                value += spread(&im, &mut dim);
            }
            for k in 0..s {
                let (ri, rj) = (row(k, i), row(k, j));
                if i == j {
                    for t in 0..n {
                        grad[ri + t] += dre[k] * 2.0 * z[ri + t];
                    }
                    continue;
                }
                for t in 0..n {
                    grad[ri + t] += dre[k] * z[rj + t];
                    grad[rj + t] += dre[k] * z[ri + t];
                }
                if opts.unitary {
                    // im = a_i . b_j - b_i . a_j
                    for t in 0..h {
                        grad[ri + t] += dim[k] * z[rj + h + t];
                        grad[ri + h + t] -= dim[k] * z[rj + t];
                        grad[rj + t] -= dim[k] * z[ri + h + t];
                        grad[rj + h + t] += dim[k] * z[ri + t];
                    }
                }
            }
        }
    }

    let terms = pairs * (s * (s - 1) / 2);
    Ok(LossEval::single(value, grad).reduce(opts.reduction, terms))
}
