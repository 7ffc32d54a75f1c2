use std::f64::consts::PI;

use rand::{Rng, RngCore};

use super::Environment;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PendulumParams {
    pub dt: f64,
    pub gravity: f64,
    pub length: f64,
    pub damping: f64,
    pub torques: Vec<f64>,
    pub omega_sample: f64,
    pub omega_clip: f64,
    pub frame: usize,
}

/// Torque-driven pendulum, `theta'' = -(g / l) sin(theta) - c omega + u`,
/// observed as two consecutive rendered frames. `theta = 0` hangs down.
///
/// The "group element" is a torque, applied for one semi-implicit Euler
/// step. Zero torque still advances time, so [`Environment::identity`]
/// returns the zero torque only as the neutral action.
#[derive(Clone, Debug, PartialEq)]
pub struct PendulumSim {
    p: PendulumParams,
}

pub(crate) fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

impl PendulumSim {
    pub fn new(p: PendulumParams) -> Result<Self> {
        let positive = [p.dt, p.gravity, p.length, p.omega_clip];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config(
                "pendulum dt, gravity, length and omega_clip must be positive",
            ));
        }
        if !(p.damping >= 0.0) || !(p.omega_sample >= 0.0) || p.omega_sample > p.omega_clip {
            return Err(Error::config(
                "pendulum needs damping >= 0 and 0 <= omega_sample <= omega_clip",
            ));
        }
        if p.torques.is_empty() || p.torques.iter().any(|u| !u.is_finite()) {
            return Err(Error::config("pendulum needs a non-empty finite torque set"));
        }
        if p.frame < 8 {
            return Err(Error::config("pendulum frames must be at least 8 pixels wide"));
        }
        Ok(Self { p })
    }

    pub fn params(&self) -> &PendulumParams {
        &self.p
    }

    /// One step `(theta, omega) -> (theta', omega')` under torque `u`.
    pub fn step(&self, theta: f64, omega: f64, u: f64) -> (f64, f64) {
        let p = &self.p;
        let accel = -(p.gravity / p.length) * theta.sin() - p.damping * omega + u;
        let omega = (omega + p.dt * accel).clamp(-p.omega_clip, p.omega_clip);
        (wrap_angle(theta + p.dt * omega), omega)
    }

    /// `omega^2 / 2 + (g / l)(1 - cos theta)`.
    pub fn energy(&self, theta: f64, omega: f64) -> f64 {
        0.5 * omega * omega + self.p.gravity / self.p.length * (1.0 - theta.cos())
    }
}

/// Anti-aliased 2-pixel rod from the frame centre at angle `theta`.
pub fn render_rod(theta: f64, frame: usize) -> Vec<f64> {
    let c = frame as f64 / 2.0;
    let len = 0.4 * frame as f64;
    let (tx, ty) = (c + len * theta.sin(), c + len * theta.cos());
    let (dx, dy) = (tx - c, ty - c);
    let seg2 = dx * dx + dy * dy;
    let mut img = Vec::with_capacity(frame * frame);
    for row in 0..frame {
        for col in 0..frame {
            let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
            let t = (((px - c) * dx + (py - c) * dy) / seg2).clamp(0.0, 1.0);
            let (ex, ey) = (px - c - t * dx, py - c - t * dy);
            let dist = (ex * ex + ey * ey).sqrt();
            img.push((1.5 - dist).clamp(0.0, 1.0));
        }
    }
    img
}

impl Environment for PendulumSim {
    fn name(&self) -> &'static str {
        "pendulum"
    }

    fn obs_dim(&self) -> usize {
        2 * self.p.frame * self.p.frame
    }

    fn state_names(&self) -> Vec<String> {
        ["theta", "omega"].map(String::from).to_vec()
    }

    fn sample_state(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let w = self.p.omega_sample;
        let omega = if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
        vec![rng.random_range(-PI..PI), omega]
    }

    fn sample_element(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![self.p.torques[rng.random_range(0..self.p.torques.len())]]
    }

    /// Distinct torques while `k` does not exceed the torque set.
    fn sample_elements(&self, rng: &mut dyn RngCore, k: usize) -> Vec<Vec<f64>> {
        let n = self.p.torques.len();
        if k <= n {
            rand::seq::index::sample(rng, n, k)
                .into_iter()
                .map(|i| vec![self.p.torques[i]])
                .collect()
        } else {
            (0..k).map(|_| self.sample_element(rng)).collect()
        }
    }

    fn identity(&self) -> Vec<f64> {
        vec![0.0]
    }

    fn act(&self, element: &[f64], state: &[f64]) -> Vec<f64> {
        let (theta, omega) = self.step(state[0], state[1], element[0]);
        vec![theta, omega]
    }

    /// Previous frame first. With the semi-implicit update the previous
    /// angle is exactly `theta - dt * omega`.
    fn observe(&self, state: &[f64]) -> Vec<f64> {
        let mut obs = render_rod(state[0] - self.p.dt * state[1], self.p.frame);
        obs.extend(render_rod(state[0], self.p.frame));
        obs
    }

    fn actions(&self) -> Option<Vec<Vec<f64>>> {
        Some(self.p.torques.iter().map(|&u| vec![u]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sim(dt: f64, damping: f64) -> PendulumSim {
        PendulumSim::new(PendulumParams {
            dt,
            gravity: 10.0,
            length: 1.0,
            damping,
            torques: vec![-2.0, 0.0, 2.0],
            omega_sample: 6.0,
            omega_clip: 1e9,
            frame: 32,
        })
        .unwrap()
    }

    fn rk4(s: &PendulumSim, theta: f64, omega: f64, h: f64, steps: usize) -> (f64, f64) {
        let k = s.p.gravity / s.p.length;
        let c = s.p.damping;
        let f = |t: f64, w: f64| (w, -k * t.sin() - c * w);
        let (mut t, mut w) = (theta, omega);
        for _ in 0..steps {
            let (a1, b1) = f(t, w);
            let (a2, b2) = f(t + 0.5 * h * a1, w + 0.5 * h * b1);
            let (a3, b3) = f(t + 0.5 * h * a2, w + 0.5 * h * b2);
            let (a4, b4) = f(t + h * a3, w + h * b3);
            t += h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
            w += h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
        }
        (t, w)
    }

    #[test]
    fn rest_state_is_a_fixed_point() {
        let s = sim(0.05, 0.0);
        let obs = s.observe(&[0.0, 0.0]);
        assert_eq!(obs[..1024], obs[1024..]);
        assert_eq!(s.act(&[0.0], &[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn rod_hangs_down() {
        let img = render_rod(0.0, 32);
        // centre column, below the pivot
        assert_eq!(img[25 * 32 + 16], 1.0);
        assert_eq!(img[5 * 32 + 16], 0.0);
        let total: f64 = img.iter().sum();
        assert!(total > 20.0 && total < 50.0);
    }

    #[test]
    fn rendering_separates_nearby_angles() {
        let a = render_rod(0.3, 32);
        let b = render_rod(0.31, 32);
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn first_order_agreement_with_rk4() {
        let horizon = 1.0;
        let mut errs = Vec::new();
        for dt in [0.02, 0.01] {
            let s = sim(dt, 0.0);
            let steps = (horizon / dt) as usize;
            let (mut t, mut w) = (1.0, 0.5);
            for _ in 0..steps {
                let u = s.step(t, w, 0.0);
                t = u.0;
                w = u.1;
            }
            let (rt, rw) = rk4(&s, 1.0, 0.5, dt / 100.0, steps * 100);
            errs.push((wrap_angle(t - rt).abs()).max((w - rw).abs()));
        }
        assert!(errs[0] < 0.2, "{errs:?}");
        let ratio = errs[0] / errs[1];
        assert!(ratio > 1.6 && ratio < 2.5, "{errs:?}");
    }

    #[test]
    fn undamped_energy_stays_within_order_dt() {
        for dt in [0.05, 0.01] {
            let s = sim(dt, 0.0);
            let (mut t, mut w) = (2.0, 1.0);
            let e0 = s.energy(t, w);
            let mut worst: f64 = 0.0;
            for _ in 0..(20.0 / dt) as usize {
                (t, w) = s.step(t, w, 0.0);
                worst = worst.max((s.energy(t, w) - e0).abs());
            }
            assert!(worst < 25.0 * dt, "dt={dt} drift {worst}");
        }
    }

    #[test]
    fn damped_energy_decays() {
        let s = sim(0.01, 0.5);
        let (mut t, mut w) = (2.5, 0.0);
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            let mut window: f64 = 0.0;
            for _ in 0..100 {
                (t, w) = s.step(t, w, 0.0);
                window = window.max(s.energy(t, w));
            }
            assert!(window <= prev);
            prev = window;
        }
    }

    #[test]
    fn three_torques_without_replacement() {
        let s = sim(0.05, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let mut u: Vec<f64> = s.sample_elements(&mut rng, 3).into_iter().map(|e| e[0]).collect();
            u.sort_by(f64::total_cmp);
            assert_eq!(u, vec![-2.0, 0.0, 2.0]);
        }
    }

    #[test]
    fn omega_is_clipped() {
        let mut p = sim(0.05, 0.0).p;
        p.omega_clip = 8.0;
        let s = PendulumSim::new(p).unwrap();
        let (_, w) = s.step(0.0, 7.99, 2.0);
        assert_eq!(w, 8.0);
    }
}
