use rand::{Rng, RngCore};

use super::Environment;
use crate::error::{Error, Result};

/// A rectangular and a triangular bump, each cyclically shifted on a ring of
/// `length` cells and superimposed. The state is the pair of shifts.
#[derive(Clone, Debug, PartialEq)]
pub struct DoubleBumpWorld {
    length: usize,
    rect: Vec<f64>,
    tri: Vec<f64>,
}

impl DoubleBumpWorld {
    pub fn new(length: usize, width: usize) -> Result<Self> {
        if width == 0 || width > length {
            return Err(Error::config(format!(
                "bump width {width} must be in 1..={length}"
            )));
        }
        let centre = (width as f64 - 1.0) / 2.0;
        let half = width as f64 / 2.0;
        let tri = (0..width)
            .map(|t| 1.0 - (t as f64 - centre).abs() / half)
            .collect();
        Ok(Self {
            length,
            rect: vec![1.0; width],
            tri,
        })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    fn shift(&self, v: f64) -> usize {
        (v as i64).rem_euclid(self.length as i64) as usize
    }
}

impl Environment for DoubleBumpWorld {
    fn name(&self) -> &'static str {
        "double_bump"
    }

    fn obs_dim(&self) -> usize {
        self.length
    }

    fn state_names(&self) -> Vec<String> {
        ["rect_shift", "tri_shift"].map(String::from).to_vec()
    }

    fn sample_state(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![
            rng.random_range(0..self.length) as f64,
            rng.random_range(0..self.length) as f64,
        ]
    }

    fn sample_element(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.sample_state(rng)
    }

    fn identity(&self) -> Vec<f64> {
        vec![0.0, 0.0]
    }

    fn act(&self, element: &[f64], state: &[f64]) -> Vec<f64> {
        vec![
            self.shift(state[0] + element[0]) as f64,
            self.shift(state[1] + element[1]) as f64,
        ]
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.length];
        let (a, b) = (self.shift(state[0]), self.shift(state[1]));
        for (t, v) in self.rect.iter().enumerate() {
            x[(t + a) % self.length] += v;
        }
        for (t, v) in self.tri.iter().enumerate() {
            x[(t + b) % self.length] += v;
        }
        x
    }

    /// Subgroup 0 moves the rectangle, subgroup 1 the triangle.
    fn subgroups(&self) -> usize {
        2
    }

    fn sample_subgroup_element(&self, subgroup: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let d = rng.random_range(0..self.length) as f64;
        match subgroup {
            0 => Ok(vec![d, 0.0]),
            1 => Ok(vec![0.0, d]),
            _ => Err(Error::config(format!("double bump has no subgroup {subgroup}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_superposition() {
        let w = DoubleBumpWorld::new(64, 16).unwrap();
        assert_eq!(w.tri[0], 1.0 - 7.5 / 8.0);
        assert_eq!(w.tri[7], w.tri[8]);
        let x = w.observe(&[0.0, 0.0]);
        assert_eq!(x.len(), 64);
        // overlapping bumps add without clipping
        assert_eq!(x[7], 1.0 + w.tri[7]);
        assert!(x[16..].iter().all(|&v| v == 0.0));
        let y = w.observe(&[60.0, 20.0]);
        assert_eq!(y[63], 1.0);
        assert_eq!(y[11], 1.0);
        assert_eq!(y[12], 0.0);
        assert_eq!(y[27], w.tri[7]);
    }

    #[test]
    fn action_composes_modulo_length() {
        let w = DoubleBumpWorld::new(64, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let s = w.sample_state(&mut rng);
            let g = w.sample_element(&mut rng);
            let h = w.sample_element(&mut rng);
            let gh = [(g[0] + h[0]) % 64.0, (g[1] + h[1]) % 64.0];
            assert_eq!(w.observe(&w.act(&h, &w.act(&g, &s))), w.observe(&w.act(&gh, &s)));
        }
    }

    #[test]
    fn subgroups_move_one_bump() {
        let w = DoubleBumpWorld::new(64, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let g = w.sample_subgroup_element(0, &mut rng).unwrap();
            assert_eq!(g[1], 0.0);
            let h = w.sample_subgroup_element(1, &mut rng).unwrap();
            assert_eq!(h[0], 0.0);
        }
    }

    #[test]
    fn rejects_oversized_bump() {
        assert!(DoubleBumpWorld::new(8, 9).is_err());
    }
}
