use std::f64::consts::PI;

use rand::{Rng, RngCore};

use super::pendulum::wrap_angle;
use super::Environment;
use crate::error::{Error, Result};

const DEFAULT_SHAPE: [[f64; 2]; 5] = [[1.0, 0.0], [0.3, 0.8], [-0.6, 0.4], [-0.5, -0.7], [0.2, -0.3]];

/// A fixed planar point set rotated about the origin; the observation is
/// the flattened rotated coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarRotationWorld {
    points: Vec<[f64; 2]>,
    max_angle: f64,
}

impl PlanarRotationWorld {
    pub fn new(points: Vec<[f64; 2]>, max_angle: f64) -> Result<Self> {
        if points.is_empty() || points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("rotation world needs finite points"));
        }
        if !(max_angle > 0.0 && max_angle <= PI) {
            return Err(Error::config("max_angle must lie in (0, pi]"));
        }
        Ok(Self { points, max_angle })
    }

    pub fn with_default_shape(max_angle: f64) -> Result<Self> {
        Self::new(DEFAULT_SHAPE.to_vec(), max_angle)
    }
}

impl Environment for PlanarRotationWorld {
    fn name(&self) -> &'static str {
        "planar_rotation"
    }

    fn obs_dim(&self) -> usize {
        2 * self.points.len()
    }

    fn state_names(&self) -> Vec<String> {
        ["angle"].map(String::from).to_vec()
    }

    fn sample_state(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.random_range(-PI..PI)]
    }

    fn sample_element(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.random_range(-self.max_angle..=self.max_angle)]
    }

    fn identity(&self) -> Vec<f64> {
        vec![0.0]
    }

    fn act(&self, element: &[f64], state: &[f64]) -> Vec<f64> {
        vec![wrap_angle(state[0] + element[0])]
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        let (s, c) = state[0].sin_cos();
        self.points
            .iter()
            .flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
            .collect()
    }
}
