//! Angle-preservation objective.

use rand::Rng;

use super::pairwise::check_slices;
use super::{LossEval, Reduction, DISTANCE_FLOOR};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_TRIPLES: usize = 4096;

/// Angle at `vertex` between the rays towards `first` and `second`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Triple {
    pub first: usize,
    pub vertex: usize,
    pub second: usize,
}

/// Batch triples used by the conformal loss. The cosine is symmetric in its
/// two endpoints, so only `first < second` is enumerated.
#[derive(Clone, Debug, PartialEq)]
pub struct TripleSet {
    points: usize,
    triples: Vec<Triple>,
}

fn endpoint_pairs(count: usize) -> usize {
    count * count.saturating_sub(1) / 2
}

impl TripleSet {
    pub fn all(points: usize) -> Result<Self> {
        if points < 3 {
            return Err(Error::contract(format!(
                "angles need at least three points, got {points}"
            )));
        }
        let mut triples = Vec::with_capacity(points * endpoint_pairs(points - 1));
        for vertex in 0..points {
            for first in 0..points {
                for second in first + 1..points {
                    if first != vertex && second != vertex {
                        triples.push(Triple {
                            first,
                            vertex,
                            second,
                        });
                    }
                }
            }
        }
        Ok(Self { points, triples })
    }

    /// All triples when there are at most `cap`, otherwise `cap` distinct
    /// triples drawn uniformly without replacement, in canonical order.
    pub fn sample<R: Rng + ?Sized>(points: usize, cap: usize, rng: &mut R) -> Result<Self> {
        if points < 3 {
            return Err(Error::contract(format!(
                "angles need at least three points, got {points}"
            )));
        }
        let per_vertex = endpoint_pairs(points - 1);
        let total = points * per_vertex;
        if total <= cap {
            return Self::all(points);
        }
        let mut picked = rand::seq::index::sample(rng, total, cap).into_vec();
        picked.sort_unstable();
        let triples = picked
            .into_iter()
            .map(|idx| {
                let vertex = idx / per_vertex;
                let (p, q) = unrank_pair(idx % per_vertex, points - 1);
                // map 0..points-1 onto 0..points skipping the vertex
                let lift = |x: usize| if x >= vertex { x + 1 } else { x };
                Triple {
                    first: lift(p),
                    vertex,
                    second: lift(q),
                }
            })
            .collect();
        Ok(Self { points, triples })
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// Lexicographic `r`-th pair `(p, q)`, `p < q < n`.
fn unrank_pair(mut r: usize, n: usize) -> (usize, usize) {
    let mut p = 0;
    loop {
        let row = n - p - 1;
        if r < row {
            return (p, p + 1 + r);
        }
        r -= row;
        p += 1;
    }
}

/// `cos` of the angle at `y1` in the triangle `(y0, y1, y2)`.
pub fn cosine_angle(y0: &[f64], y1: &[f64], y2: &[f64]) -> f64 {
    let mut uv = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for t in 0..y0.len() {
        let u = y0[t] - y1[t];
        let v = y2[t] - y1[t];
        uv += u * v;
        uu += u * u;
        vv += v * v;
    }
    uv / (uu.sqrt() * vv.sqrt())
}

/// Angle-preservation loss over a `[K + 1, B, n]` stack. Triples whose vertex
/// coincides with an endpoint (within the distance floor) in any slice are
/// skipped and counted in `LossEval::skipped`.
pub fn conformal_loss(z_all: &Tensor, triples: &TripleSet, reduction: Reduction) -> Result<LossEval> {
    let (s, b, n) = check_slices(z_all, 3)?;
    if triples.points() != b {
        return Err(Error::shape(format!(
            "triples drawn for {} points, batch has {b}",
            triples.points()
        )));
    }
    let z = z_all.data();
    let off = |k: usize, i: usize| (k * b + i) * n;

    let mut grad = vec![0.0; z.len()];
    let mut value = 0.0;
    let mut skipped = 0usize;
    let mut used = 0usize;
    let mut cos = vec![0.0; s];
    let mut dcos = vec![0.0; s];
    // per slice: u, v, |u|, |v|
    let mut u = vec![0.0; s * n];
    let mut v = vec![0.0; s * n];
    let mut nu = vec![0.0; s];
    let mut nv = vec![0.0; s];

    'triples: for t in triples.triples() {
        for k in 0..s {
            let (o0, o1, o2) = (off(k, t.first), off(k, t.vertex), off(k, t.second));
            let (mut uu, mut vv, mut uv) = (0.0, 0.0, 0.0);
            for c in 0..n {
                let a = z[o0 + c] - z[o1 + c];
                let bb = z[o2 + c] - z[o1 + c];
                u[k * n + c] = a;
                v[k * n + c] = bb;
                uu += a * a;
                vv += bb * bb;
                uv += a * bb;
            }
            nu[k] = uu.sqrt();
            nv[k] = vv.sqrt();
            if nu[k] < DISTANCE_FLOOR || nv[k] < DISTANCE_FLOOR {
                skipped += 1;
                continue 'triples;
            }
            cos[k] = uv / (nu[k] * nv[k]);
        }
        used += 1;
        let mean = cos.iter().sum::<f64>() / s as f64;
        let mut acc = 0.0;
        for k in 0..s {
            let c = cos[k] - mean;
            acc += c * c;
            dcos[k] = 2.0 * s as f64 * c;
        }
        value += s as f64 * acc;

        for k in 0..s {
            let inv = 1.0 / (nu[k] * nv[k]);
            let cu = cos[k] / (nu[k] * nu[k]);
            let cv = cos[k] / (nv[k] * nv[k]);
            let (o0, o1, o2) = (off(k, t.first), off(k, t.vertex), off(k, t.second));
            for c in 0..n {
                let (uc, vc) = (u[k * n + c], v[k * n + c]);
                let du = dcos[k] * (vc * inv - cu * uc);
                let dv = dcos[k] * (uc * inv - cv * vc);
                grad[o0 + c] += du;
                grad[o2 + c] += dv;
                grad[o1 + c] -= du + dv;
            }
        }
    }
    if skipped > 0 {
        log::debug!("conformal loss skipped {skipped} degenerate triples");
    }
    let terms = used * (s * (s - 1) / 2);
    let mut eval = LossEval::single(value, grad).reduce(reduction, terms);
    eval.skipped = skipped;
    Ok(eval)
}
