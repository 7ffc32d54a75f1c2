//! Synthetic G-sets. A learner only ever sees observations; the states and
//! group elements behind a batch are kept in a separate [`GroundTruth`].

mod block_shuffle;
mod double_bump;
#[cfg(feature = "mountain-car")]
mod mountain_car;
mod pendulum;
mod quads;
mod rotation;

pub use block_shuffle::BlockShuffleWorld;
pub use double_bump::DoubleBumpWorld;
#[cfg(feature = "mountain-car")]
pub use mountain_car::MountainCar;
pub use pendulum::{render_rod, PendulumParams, PendulumSim};
pub use quads::{collect_rl_quads, ActionBuffers};
pub use rotation::PlanarRotationWorld;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::objectives::PermutationSpec;

/// A set with a group action and an observation map.
///
/// States and group elements are small real vectors whose meaning is fixed
/// per environment (see [`Environment::state_names`]).
pub trait Environment: Send + Sync {
    fn name(&self) -> &'static str;
    fn obs_dim(&self) -> usize;
    fn state_names(&self) -> Vec<String>;
    fn sample_state(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn sample_element(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn identity(&self) -> Vec<f64>;
    /// `t(element, state)`.
    fn act(&self, element: &[f64], state: &[f64]) -> Vec<f64>;
    fn observe(&self, state: &[f64]) -> Vec<f64>;

    /// Draws the `k` shared elements of one batch.
    fn sample_elements(&self, rng: &mut dyn RngCore, k: usize) -> Vec<Vec<f64>> {
        (0..k).map(|_| self.sample_element(rng)).collect()
    }

    /// Finite action set for experience collection, if any.
    fn actions(&self) -> Option<Vec<Vec<f64>>> {
        None
    }

    /// Number of subgroups that can be sampled in isolation.
    fn subgroups(&self) -> usize {
        0
    }

    fn sample_subgroup_element(&self, subgroup: usize, _rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        Err(Error::config(format!(
            "{} has no isolated subgroup {subgroup}",
            self.name()
        )))
    }
}

/// `B` base observations and `K` transformed copies of each; copy `k` of
/// every observation used the same group element.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformBatch {
    pub base: Tensor,
    pub transformed: Tensor,
}

impl TransformBatch {
    pub fn new(base: Tensor, transformed: Tensor) -> Result<Self> {
        let (b, d) = base.dims2()?;
        let (k, tb, td) = transformed.dims3()?;
        if tb != b || td != d {
            return Err(Error::shape(format!(
                "transformed copies {:?} do not match base {:?}",
                transformed.shape(),
                base.shape()
            )));
        }
        if k == 0 {
            return Err(Error::contract(
                "a transform batch needs at least one transformation",
            ));
        }
        Ok(Self { base, transformed })
    }

    pub fn batch_size(&self) -> usize {
        self.base.shape()[0]
    }

    pub fn transforms(&self) -> usize {
        self.transformed.shape()[0]
    }

    pub fn obs_dim(&self) -> usize {
        self.base.shape()[1]
    }

    /// `[(K + 1) * B, D]`, base rows first.
    pub fn stacked(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.base.len() + self.transformed.len());
        data.extend_from_slice(self.base.data());
        data.extend_from_slice(self.transformed.data());
        Tensor::new(
            vec![(self.transforms() + 1) * self.batch_size(), self.obs_dim()],
            data,
        )
        .expect("stacked batch shape")
    }
}

/// States and elements behind a sampled batch, for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub state_names: Vec<String>,
    /// `[B][state]`
    pub base_states: Vec<Vec<f64>>,
    /// `[K][element]`
    pub elements: Vec<Vec<f64>>,
    /// `[K][B][state]`
    pub transformed_states: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    batch: TransformBatch,
    truth: GroundTruth,
}

impl Sample {
    pub fn batch(&self) -> &TransformBatch {
        &self.batch
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn into_batch(self) -> TransformBatch {
        self.batch
    }

    pub fn into_parts(self) -> (TransformBatch, GroundTruth) {
        (self.batch, self.truth)
    }
}

/// A batch whose transformations all lie in one subgroup.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgroupBatch {
    pub subgroup: usize,
    pub batch: TransformBatch,
}

fn check_counts(b: usize, k: usize) -> Result<()> {
    if b < 2 || k < 1 {
        return Err(Error::config(format!(
            "a batch needs B >= 2 and K >= 1, got B={b}, K={k}"
        )));
    }
    Ok(())
}

/// Observes `states` and their images under each of `elements`.
pub fn batch_from(env: &dyn Environment, states: Vec<Vec<f64>>, elements: Vec<Vec<f64>>) -> Result<Sample> {
    let b = states.len();
    let d = env.obs_dim();
    let mut base = Vec::with_capacity(b * d);
    for s in &states {
        base.extend(env.observe(s));
    }
    let mut transformed = Vec::with_capacity(elements.len() * b * d);
    let mut transformed_states = Vec::with_capacity(elements.len());
    for g in &elements {
        let moved: Vec<Vec<f64>> = states.iter().map(|s| env.act(g, s)).collect();
        for s in &moved {
            transformed.extend(env.observe(s));
        }
        transformed_states.push(moved);
    }
    let batch = TransformBatch::new(
        Tensor::new(vec![b, d], base)?,
        Tensor::new(vec![elements.len(), b, d], transformed)?,
    )?;
    Ok(Sample {
        batch,
        truth: GroundTruth {
            state_names: env.state_names(),
            base_states: states,
            elements,
            transformed_states,
        },
    })
}

/// `B` i.i.d. states and `K` shared group elements.
pub fn sample_batch(env: &dyn Environment, rng: &mut dyn RngCore, b: usize, k: usize) -> Result<Sample> {
    check_counts(b, k)?;
    let states = (0..b).map(|_| env.sample_state(rng)).collect();
    let elements = env.sample_elements(rng, k);
    batch_from(env, states, elements)
}

/// As [`sample_batch`], with every element drawn from one subgroup.
pub fn sample_subgroup_batch(
    env: &dyn Environment,
    rng: &mut dyn RngCore,
    subgroup: usize,
    b: usize,
    k: usize,
) -> Result<Sample> {
    check_counts(b, k)?;
    if subgroup >= env.subgroups() {
        return Err(Error::config(format!(
            "{} has {} subgroups, asked for {subgroup}",
            env.name(),
            env.subgroups()
        )));
    }
    let states = (0..b).map(|_| env.sample_state(rng)).collect();
    let elements = (0..k)
        .map(|_| env.sample_subgroup_element(subgroup, rng))
        .collect::<Result<_>>()?;
    batch_from(env, states, elements)
}

/// Observations of `count` i.i.d. states together with the states.
pub fn sample_observations(
    env: &dyn Environment,
    rng: &mut dyn RngCore,
    count: usize,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let states: Vec<Vec<f64>> = (0..count).map(|_| env.sample_state(rng)).collect();
    let mut data = Vec::with_capacity(count * env.obs_dim());
    for s in &states {
        data.extend(env.observe(s));
    }
    Ok((Tensor::new(vec![count, env.obs_dim()], data)?, states))
}

fn default_length() -> usize {
    64
}

fn default_width() -> usize {
    16
}

fn default_dt() -> f64 {
    0.05
}

fn default_gravity() -> f64 {
    10.0
}

fn default_one() -> f64 {
    1.0
}

fn default_torques() -> Vec<f64> {
    vec![-2.0, 0.0, 2.0]
}

fn default_omega_sample() -> f64 {
    6.0
}

fn default_omega_clip() -> f64 {
    8.0
}

fn default_frame() -> usize {
    32
}

fn default_max_angle() -> f64 {
    std::f64::consts::PI
}

fn default_slots() -> usize {
    4
}

fn default_slot_width() -> usize {
    3
}

fn symmetric() -> PermutationSpec {
    PermutationSpec::Symmetric
}

/// Environment section of a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    DoubleBump {
        #[serde(default = "default_length")]
        length: usize,
        #[serde(default = "default_width")]
        width: usize,
    },
    Pendulum {
        #[serde(default = "default_dt")]
        dt: f64,
        #[serde(default = "default_gravity")]
        gravity: f64,
        #[serde(default = "default_one")]
        length: f64,
        #[serde(default)]
        damping: f64,
        #[serde(default = "default_torques")]
        torques: Vec<f64>,
        /// States are drawn with `|omega| <= omega_sample`.
        #[serde(default = "default_omega_sample")]
        omega_sample: f64,
        #[serde(default = "default_omega_clip")]
        omega_clip: f64,
        #[serde(default = "default_frame")]
        frame: usize,
    },
    PlanarRotation {
        #[serde(default)]
        points: Option<Vec<[f64; 2]>>,
        /// Elements are drawn from `[-max_angle, max_angle]`.
        #[serde(default = "default_max_angle")]
        max_angle: f64,
    },
    BlockShuffle {
        #[serde(default = "default_slots")]
        slots: usize,
        #[serde(default = "default_slot_width")]
        slot_width: usize,
        #[serde(default = "symmetric")]
        permutations: PermutationSpec,
        #[serde(default)]
        feature_seed: u64,
    },
    #[cfg(feature = "mountain-car")]
    MountainCar {
        #[serde(default = "default_length")]
        cells: usize,
    },
}

impl EnvSpec {
    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvSpec::DoubleBump { length, width } => Box::new(DoubleBumpWorld::new(*length, *width)?),
            EnvSpec::Pendulum {
                dt,
                gravity,
                length,
                damping,
                torques,
                omega_sample,
                omega_clip,
                frame,
            } => Box::new(PendulumSim::new(pendulum::PendulumParams {
                dt: *dt,
                gravity: *gravity,
                length: *length,
                damping: *damping,
                torques: torques.clone(),
                omega_sample: *omega_sample,
                omega_clip: *omega_clip,
                frame: *frame,
            })?),
            EnvSpec::PlanarRotation { points, max_angle } => Box::new(match points {
                Some(p) => PlanarRotationWorld::new(p.clone(), *max_angle)?,
                None => PlanarRotationWorld::with_default_shape(*max_angle)?,
            }),
            EnvSpec::BlockShuffle {
                slots,
                slot_width,
                permutations,
                feature_seed,
            } => Box::new(BlockShuffleWorld::new(
                *slots,
                *slot_width,
                permutations,
                *feature_seed,
            )?),
            #[cfg(feature = "mountain-car")]
            EnvSpec::MountainCar { cells } => Box::new(MountainCar::new(*cells)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn specs() -> Vec<EnvSpec> {
        vec![
            serde_json::from_str(r#"{"kind": "double_bump"}"#).unwrap(),
            serde_json::from_str(r#"{"kind": "pendulum"}"#).unwrap(),
            serde_json::from_str(r#"{"kind": "planar_rotation"}"#).unwrap(),
            serde_json::from_str(r#"{"kind": "block_shuffle"}"#).unwrap(),
        ]
    }

    #[test]
    fn equal_seeds_give_identical_batches() {
        for spec in specs() {
            let env = spec.build().unwrap();
            let a = sample_batch(env.as_ref(), &mut ChaCha8Rng::seed_from_u64(5), 6, 3).unwrap();
            let b = sample_batch(env.as_ref(), &mut ChaCha8Rng::seed_from_u64(5), 6, 3).unwrap();
            assert_eq!(a, b, "{}", env.name());
            assert_eq!(a.batch().obs_dim(), env.obs_dim());
        }
    }

    #[test]
    fn identity_elements_leave_observations_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spec in specs() {
            let env = spec.build().unwrap();
            let states: Vec<_> = (0..4).map(|_| env.sample_state(&mut rng)).collect();
            if env.name() == "pendulum" {
                // one dynamics step is not an identity
                continue;
            }
            let s = batch_from(env.as_ref(), states, vec![env.identity(); 2]).unwrap();
            let b = s.batch();
            for k in 0..2 {
                assert_eq!(
                    &b.transformed.data()[k * b.base.len()..(k + 1) * b.base.len()],
                    b.base.data(),
                    "{}",
                    env.name()
                );
            }
        }
    }

    #[test]
    fn double_bump_default_batch_shape() {
        let env = DoubleBumpWorld::new(64, 16).unwrap();
        let s = sample_batch(&env, &mut ChaCha8Rng::seed_from_u64(0), 64, 15).unwrap();
        assert_eq!(s.batch().stacked().shape(), &[16 * 64, 64]);
        assert_eq!(s.truth().elements.len(), 15);
    }

    #[test]
    fn parameter_validation() {
        let env = DoubleBumpWorld::new(64, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_batch(&env, &mut rng, 1, 3).is_err());
        assert!(sample_batch(&env, &mut rng, 4, 0).is_err());
        assert!(sample_subgroup_batch(&env, &mut rng, 2, 4, 1).is_err());
        assert!(serde_json::from_str::<EnvSpec>(r#"{"kind": "pendulum", "mass": 1}"#).is_err());
    }
}
