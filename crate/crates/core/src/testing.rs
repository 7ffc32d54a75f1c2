use rand::Rng;

use crate::autodiff::Tensor;

pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn random_stack<R: Rng + ?Sized>(rng: &mut R, s: usize, b: usize, n: usize) -> Tensor {
    let data = (0..s * b * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![s, b, n], data).unwrap()
}

/// Random orthogonal matrix (Gram-Schmidt rows) and translation.
pub fn rigid_motion<R: Rng + ?Sized>(rng: &mut R, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
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
    let shift = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    (rows, shift)
}

pub fn apply_motion(q: &[Vec<f64>], shift: &[f64], z: &[f64]) -> Vec<f64> {
    q.iter()
        .zip(shift)
        .map(|(row, c)| row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + c)
        .collect()
}
