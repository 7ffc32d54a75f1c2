//! Injectivity penalties over distinct pairs of embeddings.

use serde::{Deserialize, Serialize};

use super::{LossEval, Reduction, DISTANCE_FLOOR};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BarrierKind {
    /// `max(epsilon - d, 0)`
    Hinge { epsilon: f64 },
    /// `1 / d`
    Reciprocal,
    /// `-log d`
    LogBarrier,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBarrier", into = "RawBarrier")]
pub struct BarrierSpec {
    pub kind: BarrierKind,
    pub coefficient: f64,
    pub reduction: Reduction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum BarrierName {
    Hinge,
    Reciprocal,
    LogBarrier,
}

/// Flat config form: `{"kind": "hinge", "epsilon": 1.0, "coefficient": 1.0}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBarrier {
    kind: BarrierName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    coefficient: f64,
    #[serde(default = "sum")]
    reduction: Reduction,
}

fn sum() -> Reduction {
    Reduction::Sum
}

impl TryFrom<RawBarrier> for BarrierSpec {
    type Error = String;

    fn try_from(raw: RawBarrier) -> std::result::Result<Self, String> {
        let kind = match (raw.kind, raw.epsilon) {
            (BarrierName::Hinge, Some(epsilon)) => BarrierKind::Hinge { epsilon },
            (BarrierName::Hinge, None) => return Err("hinge barrier needs `epsilon`".into()),
            (_, Some(_)) => return Err("`epsilon` only applies to the hinge barrier".into()),
            (BarrierName::Reciprocal, None) => BarrierKind::Reciprocal,
            (BarrierName::LogBarrier, None) => BarrierKind::LogBarrier,
        };
        Ok(Self {
            kind,
            coefficient: raw.coefficient,
            reduction: raw.reduction,
        })
    }
}

impl From<BarrierSpec> for RawBarrier {
    fn from(spec: BarrierSpec) -> Self {
        let (kind, epsilon) = match spec.kind {
            BarrierKind::Hinge { epsilon } => (BarrierName::Hinge, Some(epsilon)),
            BarrierKind::Reciprocal => (BarrierName::Reciprocal, None),
            BarrierKind::LogBarrier => (BarrierName::LogBarrier, None),
        };
        Self {
            kind,
            epsilon,
            coefficient: spec.coefficient,
            reduction: spec.reduction,
        }
    }
}

impl BarrierSpec {
    pub fn log_barrier(coefficient: f64) -> Self {
        Self {
            kind: BarrierKind::LogBarrier,
            coefficient,
            reduction: Reduction::Sum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.coefficient.is_finite() || self.coefficient < 0.0 {
            return Err(Error::config(format!(
                "barrier coefficient must be finite and non-negative, got {}",
                self.coefficient
            )));
        }
        if let BarrierKind::Hinge { epsilon } = self.kind {
            if !(epsilon > 0.0 && epsilon.is_finite()) {
                return Err(Error::config(format!(
                    "hinge margin must be positive, got {epsilon}"
                )));
            }
        }
        Ok(())
    }
}

/// Unweighted barrier value (the coefficient is not applied).
pub fn barrier_terms(z: &Tensor, kind: BarrierKind, reduction: Reduction) -> Result<LossEval> {
    let (b, n) = z.dims2()?;
    if b < 2 {
        return Err(Error::contract(format!(
            "injectivity needs at least two embeddings, got {b}"
        )));
    }
    let data = z.data();
    let mut grad = vec![0.0; data.len()];
    let mut value = 0.0;
    let mut clamped = 0usize;
    let mut diff = vec![0.0; n];

    for i in 0..b {
        for j in i + 1..b {
            let mut sq = 0.0;
            for t in 0..n {
                diff[t] = data[i * n + t] - data[j * n + t];
                sq += diff[t] * diff[t];
            }
            let raw = sq.sqrt();
            let floored = raw < DISTANCE_FLOOR;
            let d = raw.max(DISTANCE_FLOOR);
            let (v, dv) = match kind {
                BarrierKind::Hinge { epsilon } => {
                    if d < epsilon {
                        (epsilon - d, -1.0)
                    } else {
                        (0.0, 0.0)
                    }
                }
                BarrierKind::Reciprocal => (1.0 / d, -1.0 / (d * d)),
                BarrierKind::LogBarrier => (-d.ln(), -1.0 / d),
            };
            if floored {
                if !matches!(kind, BarrierKind::Hinge { .. }) {
                    clamped += 1;
                }
                value += v;
                continue;
            }
            value += v;
            let scale = dv / d;
            for t in 0..n {
                grad[i * n + t] += scale * diff[t];
                grad[j * n + t] -= scale * diff[t];
            }
        }
    }
    if clamped > 0 {
        log::debug!("{clamped} coincident embedding pairs clamped at distance {DISTANCE_FLOOR:e}");
    }
    let mut eval = LossEval::single(value, grad).reduce(reduction, b * (b - 1) / 2);
    eval.skipped = clamped;
    Ok(eval)
}

/// `coefficient * barrier(z)` for a `[B, n]` batch of embeddings.
pub fn injectivity_loss(z: &Tensor, spec: &BarrierSpec) -> Result<LossEval> {
    spec.validate()?;
    Ok(barrier_terms(z, spec.kind, spec.reduction)?.scaled(spec.coefficient))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::random_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(kind: BarrierKind, coefficient: f64) -> BarrierSpec {
        BarrierSpec {
            kind,
            coefficient,
            reduction: Reduction::Sum,
        }
    }

    #[test]
    fn hinge_on_close_pair() {
        let z = Tensor::from_rows(&[[0.0, 0.0], [0.4, 0.0]]).unwrap();
        let l = injectivity_loss(&z, &spec(BarrierKind::Hinge { epsilon: 1.0 }, 2.5)).unwrap();
        assert!((l.value - 0.6 * 2.5).abs() < 1e-15);
    }

    #[test]
    fn log_barrier_at_unit_distances_is_zero() {
        let h = 3f64.sqrt() / 2.0;
        let z = Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.5, h]]).unwrap();
        let l = injectivity_loss(&z, &BarrierSpec::log_barrier(1.0)).unwrap();
        assert!(l.value.abs() < 1e-15);
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let z = random_matrix(&mut rng, 4, 3);
        let kinds = [
            BarrierKind::Hinge { epsilon: 1.5 },
            BarrierKind::Reciprocal,
            BarrierKind::LogBarrier,
        ];
        for kind in kinds {
            let mut want = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    if i < j {
                        let d = z
                            .row(i)
                            .iter()
                            .zip(z.row(j))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        want += match kind {
                            BarrierKind::Hinge { epsilon } => (epsilon - d).max(0.0),
                            BarrierKind::Reciprocal => 1.0 / d,
                            BarrierKind::LogBarrier => -d.ln(),
                        };
                    }
                }
            }
            let got = injectivity_loss(&z, &spec(kind, 0.7)).unwrap().value;
            assert!((got - 0.7 * want).abs() < 1e-12);
        }
    }

    #[test]
    fn coincident_points_are_clamped() {
        let z = Tensor::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let l = injectivity_loss(&z, &BarrierSpec::log_barrier(1.0)).unwrap();
        assert!((l.value + DISTANCE_FLOOR.ln()).abs() < 1e-9);
        assert_eq!(l.skipped, 1);
        assert!(l.grads[0].iter().all(|g| g.is_finite()));
    }

    #[test]
    fn rejects_bad_specs() {
        let z = Tensor::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(injectivity_loss(&z, &spec(BarrierKind::Hinge { epsilon: 0.0 }, 1.0)).is_err());
        assert!(injectivity_loss(&z, &spec(BarrierKind::Reciprocal, f64::NAN)).is_err());
        let single = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        assert!(matches!(
            injectivity_loss(&single, &BarrierSpec::log_barrier(1.0)),
            Err(Error::Contract(_))
        ));
    }
}
