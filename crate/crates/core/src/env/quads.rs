use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use super::{Environment, TransformBatch};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Observed transitions `(x, x_t)` grouped by the action that produced them.
/// Any two pairs from one buffer were transformed by the same element.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionBuffers {
    actions: Vec<Vec<f64>>,
    buffers: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl ActionBuffers {
    pub fn actions(&self) -> &[Vec<f64>] {
        &self.actions
    }

    pub fn buffer(&self, action: usize) -> &[(Vec<f64>, Vec<f64>)] {
        &self.buffers[action]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.buffers.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.buffers.iter().map(Vec::len).sum()
    }

    pub fn shuffle(&mut self, rng: &mut dyn RngCore) {
        for b in &mut self.buffers {
            b.shuffle(rng);
        }
    }

    /// `B` distinct pairs from one buffer as a single-transformation batch.
    pub fn sample_batch(&self, action: usize, b: usize, rng: &mut dyn RngCore) -> Result<TransformBatch> {
        let Some(buf) = self.buffers.get(action) else {
            return Err(Error::config(format!("no action with index {action}")));
        };
        if buf.is_empty() {
            return Err(Error::Sampling(format!(
                "buffer for action {action} {:?} is empty",
                self.actions[action]
            )));
        }
        if buf.len() < b {
            return Err(Error::Sampling(format!(
                "buffer for action {action} {:?} holds {} transitions, {b} requested",
                self.actions[action],
                buf.len()
            )));
        }
        let d = buf[0].0.len();
        let mut base = Vec::with_capacity(b * d);
        let mut moved = Vec::with_capacity(b * d);
        for i in rand::seq::index::sample(rng, buf.len(), b) {
            base.extend_from_slice(&buf[i].0);
            moved.extend_from_slice(&buf[i].1);
        }
        TransformBatch::new(Tensor::new(vec![b, d], base)?, Tensor::new(vec![1, b, d], moved)?)
    }
}

/// Rolls out uniformly random actions for `episodes` episodes of `steps`
/// steps each, starting from freshly sampled states.
pub fn collect_rl_quads(
    env: &dyn Environment,
    rng: &mut dyn RngCore,
    episodes: usize,
    steps: usize,
) -> Result<ActionBuffers> {
    let actions = env
        .actions()
        .ok_or_else(|| Error::config(format!("{} has no finite action set", env.name())))?;
    let mut buffers = vec![Vec::new(); actions.len()];
    for _ in 0..episodes {
        let mut state = env.sample_state(rng);
        let mut obs = env.observe(&state);
        for _ in 0..steps {
            let a = rng.random_range(0..actions.len());
            let next = env.act(&actions[a], &state);
            let next_obs = env.observe(&next);
            buffers[a].push((obs, next_obs.clone()));
            state = next;
            obs = next_obs;
        }
    }
    Ok(ActionBuffers { actions, buffers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::BlockShuffleWorld;
    use crate::objectives::PermutationSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn buffer_sizes_add_up() {
        let env = BlockShuffleWorld::new(2, 2, &PermutationSpec::Symmetric, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bufs = collect_rl_quads(&env, &mut rng, 1, 10).unwrap();
        assert_eq!(bufs.actions().len(), 2);
        assert_eq!(bufs.total(), 10);
    }

    #[test]
    fn pairs_in_a_buffer_share_the_action() {
        let env = BlockShuffleWorld::new(3, 2, &PermutationSpec::Symmetric, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bufs = collect_rl_quads(&env, &mut rng, 4, 25).unwrap();
        let mut checked = 0;
        for (a, g) in bufs.actions().iter().enumerate() {
            for (x, xt) in bufs.buffer(a) {
                // slot s of x must reappear as slot p[s] of x_t
                let p = &env.group().elements()[g[0] as usize];
                for s in 0..3 {
                    assert_eq!(x[2 * s..2 * s + 2], xt[2 * p[s]..2 * p[s] + 2]);
                }
                checked += 1;
            }
        }
        assert_eq!(checked, 100);
    }

    #[test]
    fn empty_buffer_names_the_action() {
        let env = BlockShuffleWorld::new(3, 1, &PermutationSpec::Symmetric, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bufs = collect_rl_quads(&env, &mut rng, 0, 0).unwrap();
        match bufs.sample_batch(4, 2, &mut rng) {
            Err(Error::Sampling(msg)) => assert!(msg.contains("action 4")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
