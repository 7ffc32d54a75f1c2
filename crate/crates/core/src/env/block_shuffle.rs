use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Environment;
use crate::error::{Error, Result};
use crate::objectives::{PermutationGroup, PermutationSpec};

/// `m` fixed objects placed in `m` slots; the group permutes slot contents.
///
/// The state is the object index held by each slot followed by a brightness
/// per slot in `[0.5, 1.5]`, so batches rarely repeat an observation. An
/// element is the index of a group permutation `p`, which moves the content
/// of slot `s` to slot `p[s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockShuffleWorld {
    features: Vec<Vec<f64>>,
    group: PermutationGroup,
}

impl BlockShuffleWorld {
    pub fn new(slots: usize, slot_width: usize, spec: &PermutationSpec, feature_seed: u64) -> Result<Self> {
        if slots < 2 || slot_width == 0 {
            return Err(Error::config(
                "block shuffle needs at least two slots of positive width",
            ));
        }
        let group = PermutationGroup::from_spec(spec, slots)?;
        if group.elements().is_empty() {
            return Err(Error::config(
                "block shuffle needs an enumerable permutation group",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(feature_seed);
        let features = (0..slots)
            .map(|_| (0..slot_width).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        Ok(Self { features, group })
    }

    pub fn group(&self) -> &PermutationGroup {
        &self.group
    }

    fn slot_width(&self) -> usize {
        self.features[0].len()
    }
}

impl Environment for BlockShuffleWorld {
    fn name(&self) -> &'static str {
        "block_shuffle"
    }

    fn obs_dim(&self) -> usize {
        self.features.len() * self.slot_width()
    }

    fn state_names(&self) -> Vec<String> {
        let m = self.features.len();
        (0..m)
            .map(|i| format!("slot{i}"))
            .chain((0..m).map(|i| format!("brightness{i}")))
            .collect()
    }

    /// A uniformly drawn group element applied to the sorted arrangement.
    fn sample_state(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let m = self.features.len();
        let mut state: Vec<f64> = (0..m).map(|i| i as f64).collect();
        state.extend((0..m).map(|_| rng.random_range(0.5..1.5)));
        let g = self.sample_element(rng);
        let mut arranged = self.act(&g, &state);
        arranged[m..].copy_from_slice(&state[m..]);
        arranged
    }

    fn sample_element(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.random_range(0..self.group.elements().len()) as f64]
    }

    fn identity(&self) -> Vec<f64> {
        let id: Vec<usize> = (0..self.features.len()).collect();
        let pos = self
            .group
            .elements()
            .iter()
            .position(|p| *p == id)
            .expect("group has identity");
        vec![pos as f64]
    }

    fn act(&self, element: &[f64], state: &[f64]) -> Vec<f64> {
        let p = &self.group.elements()[element[0] as usize];
        let m = p.len();
        let mut out = vec![0.0; state.len()];
        for s in 0..m {
            out[p[s]] = state[s];
            out[m + p[s]] = state[m + s];
        }
        out
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        let m = self.features.len();
        (0..m)
            .flat_map(|s| {
                let gain = state[m + s];
                self.features[state[s] as usize].iter().map(move |v| gain * v)
            })
            .collect()
    }

    fn actions(&self) -> Option<Vec<Vec<f64>>> {
        Some((0..self.group.elements().len()).map(|i| vec![i as f64]).collect())
    }
}
