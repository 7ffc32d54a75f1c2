use super::pairwise::check_slices;
use super::{LossEval, Reduction};
use crate::autodiff::Tensor;
use crate::error::Result;

/// `sum_i sum_{k>=1} |z[k][i] - z[0][i]|^2` over a `[K + 1, B, q]` stack of
/// invariant codes.
pub fn invariant_feature_loss(z_inv: &Tensor, reduction: Reduction) -> Result<LossEval> {
    let (s, b, q) = check_slices(z_inv, 1)?;
    let z = z_inv.data();
    let mut grad = vec![0.0; z.len()];
    let mut value = 0.0;
    for k in 1..s {
        for i in 0..b {
            let (base, moved) = (i * q, (k * b + i) * q);
            for t in 0..q {
                let d = z[moved + t] - z[base + t];
                value += d * d;
                grad[moved + t] += 2.0 * d;
                grad[base + t] -= 2.0 * d;
            }
        }
    }
    Ok(LossEval::single(value, grad).reduce(reduction, b * (s - 1)))
}
