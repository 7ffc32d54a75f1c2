//! Run configuration: a single strict JSON document, optionally seeded from
//! a bundled preset and patched with dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::autodiff::Activation;
use crate::decomposition::DecompositionSpec;
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::objectives::{BarrierSpec, GroupObjective};

pub const PRESETS: &[(&str, &str)] = &[
    ("pendulum", include_str!("../presets/pendulum.json")),
    (
        "doublebump_passive",
        include_str!("../presets/doublebump_passive.json"),
    ),
    (
        "doublebump_active",
        include_str!("../presets/doublebump_active.json"),
    ),
    (
        "doublebump_conformal",
        include_str!("../presets/doublebump_conformal.json"),
    ),
    (
        "blockshuffle_finite",
        include_str!("../presets/blockshuffle_finite.json"),
    ),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Halve the learning rate every `every` steps.
    Halve {
        every: u64,
    },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Halve { every } => base * 0.5f64.powi((step / every) as i32),
        }
    }
}

fn default_name() -> String {
    "run".into()
}

fn default_barrier() -> BarrierSpec {
    BarrierSpec::log_barrier(1.0)
}

fn default_lr() -> f64 {
    1e-3
}

fn default_schedule() -> LrSchedule {
    LrSchedule::Constant
}

fn default_wd() -> f64 {
    1e-7
}

fn default_steps() -> u64 {
    5000
}

fn default_batch() -> usize {
    64
}

fn default_transforms() -> usize {
    3
}

fn default_checkpoint_every() -> u64 {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub env: EnvSpec,
    pub encoder: EncoderSpec,
    /// Exactly one of `objective` and `decomposition` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<GroupObjective>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposition: Option<DecompositionSpec>,
    #[serde(default = "default_barrier")]
    pub barrier: BarrierSpec,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_schedule")]
    pub schedule: LrSchedule,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_transforms")]
    pub transforms: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))
    }

    pub fn preset(name: &str) -> Result<Self> {
        let name = name.strip_suffix(".json").unwrap_or(name);
        PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_json(text))
            .unwrap_or_else(|| {
                let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                Err(Error::config(format!(
                    "no preset {name:?}; known presets: {known:?}"
                )))
            })
    }

    /// Reads `source` as a file when it exists, otherwise as a preset name.
    /// `overrides` are `dotted.path=value` strings applied in order.
    pub fn load(source: &str, overrides: &[String]) -> Result<Self> {
        let path = Path::new(source);
        let mut value: Value = if path.is_file() {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{source}: {e}")))?
        } else {
            serde_json::to_value(Self::preset(source)?)?
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config = Self::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let env = self.env.build()?;
        let mut widths = vec![env.obs_dim()];
        widths.extend(&self.encoder.hidden);
        widths.push(self.encoder.output);
        if widths.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        match (&self.objective, &self.decomposition) {
            (Some(GroupObjective::Informed { .. }), None) => {
                return Err(Error::config(
                    "the informed objective needs labelled triples and cannot drive a training run",
                ))
            }
            (Some(obj), None) => obj.validate(self.encoder.output)?,
            (None, Some(dec)) => {
                dec.validate(self.encoder.output)?;
                if dec.mode == crate::decomposition::DecompositionMode::Active
                    && env.subgroups() < dec.blocks.len()
                {
                    return Err(Error::config(format!(
                        "active decomposition over {} blocks but {} exposes {} subgroups",
                        dec.blocks.len(),
                        env.name(),
                        env.subgroups()
                    )));
                }
            }
            _ => {
                return Err(Error::config(
                    "set exactly one of `objective` and `decomposition`",
                ))
            }
        }
        self.barrier.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if let LrSchedule::Halve { every: 0 } = self.schedule {
            return Err(Error::config("halving period must be positive"));
        }
        if self.batch_size < 2 || self.transforms < 1 {
            return Err(Error::config("batch_size must be >= 2 and transforms >= 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        Ok(())
    }

    pub fn widths(&self, input: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(&self.encoder.hidden);
        w.push(self.encoder.output);
        w
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form with `steps` removed, so a run can
    /// be extended by resuming with a larger step count.
    pub fn content_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("steps");
        }
        // serde_json maps are sorted, which makes this canonical
        let text = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Sets `path` (dot-separated object keys or array indices) inside `root`.
/// The right-hand side is parsed as JSON and falls back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("bad override path {path:?}")));
    }
    let mut node = root;
    for (depth, key) in keys.iter().enumerate() {
        let last = depth + 1 == keys.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| Error::config(format!("{path}: {key:?} is not an index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::config(format!("{path}: index {idx} out of {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(Error::config(format!(
                    "{path}: cannot descend into a scalar at {key:?}"
                )))
            }
        };
    }
    unreachable!("the last key returns inside the loop")
}
