#![allow(dead_code)]

use rand::Rng;
use symcode::autodiff::Tensor;

pub fn random_stack<R: Rng + ?Sized>(rng: &mut R, s: usize, b: usize, n: usize) -> Tensor {
    let data = (0..s * b * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![s, b, n], data).unwrap()
}

pub fn random_rows<R: Rng + ?Sized>(rng: &mut R, b: usize, n: usize) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Random orthogonal matrix by Gram-Schmidt; a reflection half of the time.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in &rows {
            let d: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows
}

/// `z -> scale * Q z + shift`.
#[derive(Clone, Debug)]
pub struct Similarity {
    pub q: Vec<Vec<f64>>,
    pub scale: f64,
    pub shift: Vec<f64>,
}

impl Similarity {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Self {
        Self {
            q: random_orthogonal(rng, n),
            scale,
            shift: (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
        }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.q
            .iter()
            .zip(&self.shift)
            .map(|(row, c)| self.scale * row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + c)
            .collect()
    }

    pub fn apply_rows(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.apply(r)).collect()
    }
}

/// Stack whose slice `k > 0` is a fresh map of slice 0 drawn by `draw`.
pub fn mapped_stack<R: Rng + ?Sized>(
    rng: &mut R,
    s: usize,
    b: usize,
    n: usize,
    mut draw: impl FnMut(&mut R) -> Similarity,
) -> Tensor {
    let base = random_rows(rng, b, n);
    let mut data: Vec<f64> = base.concat();
    for _ in 1..s {
        let t = draw(rng);
        for row in &base {
            data.extend(t.apply(row));
        }
    }
    Tensor::new(vec![s, b, n], data).unwrap()
}

/// Reorders the `B` axis of a `[S, B, n]` stack, identically in every slice.
pub fn permute_batch(stack: &Tensor, perm: &[usize]) -> Tensor {
    let (s, b, n) = stack.dims3().unwrap();
    let mut data = Vec::with_capacity(stack.len());
    for k in 0..s {
        for &i in perm {
            data.extend_from_slice(&stack.data()[(k * b + i) * n..(k * b + i + 1) * n]);
        }
    }
    Tensor::new(vec![s, b, n], data).unwrap()
}

pub fn scaled(t: &Tensor, c: f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| c * x).collect()).unwrap()
}

pub fn slice(stack: &Tensor, k: usize) -> Tensor {
    let (_, b, n) = stack.dims3().unwrap();
    Tensor::new(vec![b, n], stack.data()[k * b * n..(k + 1) * b * n].to_vec()).unwrap()
}

/// Rank of the true candidate by sorting every candidate, the true one
/// placed after any reference at the same distance.
pub fn brute_force_rank(prediction: &[f64], truth: &[f64], references: &[Vec<f64>]) -> usize {
    let dist = |c: &[f64]| -> f64 { c.iter().zip(prediction).map(|(a, b)| (a - b).powi(2)).sum() };
    let mut candidates: Vec<(f64, bool)> = references.iter().map(|r| (dist(r), false)).collect();
    candidates.push((dist(truth), true));
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    1 + candidates.iter().position(|c| c.1).unwrap()
}

/// `(H@1, MRR)` from [`brute_force_rank`].
pub fn brute_force_metrics(preds: &[Vec<f64>], truths: &[Vec<f64>], refs: &[Vec<f64>]) -> (f64, f64) {
    let ranks: Vec<usize> = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| brute_force_rank(p, t, refs))
        .collect();
    let q = ranks.len() as f64;
    (
        ranks.iter().filter(|&&r| r == 1).count() as f64 / q,
        ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / q,
    )
}

/// Small integer coordinates, so exact distance ties are common.
pub fn grid_rows<R: Rng + ?Sized>(rng: &mut R, count: usize, n: usize, span: i32) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..n).map(|_| rng.random_range(-span..=span) as f64).collect())
        .collect()
}

pub fn identity_encoder(n: usize) -> symcode::autodiff::EncoderModel {
    let mut w = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        w.data_mut()[i * n + i] = 1.0;
    }
    symcode::autodiff::EncoderModel::from_params(vec![n, n], vec![], vec![w, Tensor::zeros(vec![n])], 0)
        .unwrap()
}

/// Predicts `z' = z` for every action.
pub fn still_transition(n: usize, actions: usize) -> symcode::eval::TransitionModel {
    let net = symcode::autodiff::EncoderModel::from_params(
        vec![n + actions, n],
        vec![],
        vec![Tensor::zeros(vec![n + actions, n]), Tensor::zeros(vec![n])],
        0,
    )
    .unwrap();
    symcode::eval::TransitionModel { net, actions }
}
