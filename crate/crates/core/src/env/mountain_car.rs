use rand::{Rng, RngCore};

use super::Environment;
use crate::error::{Error, Result};

const MIN_POS: f64 = -1.2;
const MAX_POS: f64 = 0.6;
const MAX_SPEED: f64 = 0.07;

/// Car in a valley, pushed left, not at all, or right. Observed as two
/// consecutive one-dimensional rasters of the car position.
#[derive(Clone, Debug, PartialEq)]
pub struct MountainCar {
    cells: usize,
}

impl MountainCar {
    pub fn new(cells: usize) -> Result<Self> {
        if cells < 8 {
            return Err(Error::config("mountain car raster needs at least 8 cells"));
        }
        Ok(Self { cells })
    }

    pub fn step(&self, pos: f64, vel: f64, force: f64) -> (f64, f64) {
        let vel = (vel + 0.001 * force - 0.0025 * (3.0 * pos).cos()).clamp(-MAX_SPEED, MAX_SPEED);
        let pos = (pos + vel).clamp(MIN_POS, MAX_POS);
        let vel = if pos == MIN_POS && vel < 0.0 { 0.0 } else { vel };
        (pos, vel)
    }

    fn raster(&self, pos: f64) -> Vec<f64> {
        let u = (pos - MIN_POS) / (MAX_POS - MIN_POS) * (self.cells - 1) as f64;
        (0..self.cells)
            .map(|i| (1.0 - (i as f64 - u).abs()).max(0.0))
            .collect()
    }
}

impl Environment for MountainCar {
    fn name(&self) -> &'static str {
        "mountain_car"
    }

    fn obs_dim(&self) -> usize {
        2 * self.cells
    }

    fn state_names(&self) -> Vec<String> {
        ["position", "velocity"].map(String::from).to_vec()
    }

    fn sample_state(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![
            rng.random_range(MIN_POS..MAX_POS),
            rng.random_range(-MAX_SPEED..MAX_SPEED),
        ]
    }

    fn sample_element(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.random_range(-1i32..=1) as f64]
    }

    fn identity(&self) -> Vec<f64> {
        vec![0.0]
    }

    fn act(&self, element: &[f64], state: &[f64]) -> Vec<f64> {
        let (p, v) = self.step(state[0], state[1], element[0]);
        vec![p, v]
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        let mut obs = self.raster((state[0] - state[1]).clamp(MIN_POS, MAX_POS));
        obs.extend(self.raster(state[0]));
        obs
    }

    fn actions(&self) -> Option<Vec<Vec<f64>>> {
        Some(vec![vec![-1.0], vec![0.0], vec![1.0]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn car_stops_at_left_wall() {
        let car = MountainCar::new(64).unwrap();
        let (p, v) = car.step(-1.19, -0.05, -1.0);
        assert_eq!((p, v), (MIN_POS, 0.0));
    }

    #[test]
    fn raster_has_unit_mass() {
        let car = MountainCar::new(64).unwrap();
        let s: f64 = car.raster(-0.3).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
