//! Checkpoint files: one JSON header line followed by the raw parameters
//! (and optimizer moments) as little-endian f64.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Activation, AdamState, EncoderModel, Tensor};
use crate::error::{Error, Result};

pub const FORMAT: &str = "symcode-checkpoint";
pub const VERSION: u32 = 1;

/// Random streams that must survive a resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngStates {
    pub sampling: ChaCha8Rng,
    pub triples: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: EncoderModel,
    pub step: u64,
    pub config_hash: Option<String>,
    pub adam: Option<AdamState>,
    pub rng: Option<RngStates>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    step: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    widths: Vec<usize>,
    activations: Vec<Activation>,
    seed: u64,
    step: u64,
    config_hash: Option<String>,
    tensors: Vec<TensorEntry>,
    adam: Option<AdamHeader>,
    rng: Option<RngStates>,
    payload_bytes: usize,
    sha256: String,
}

fn tensor_names(count: usize) -> Vec<String> {
    (0..count)
        .map(|i| format!("{}{}", if i % 2 == 0 { "W" } else { "b" }, i / 2))
        .collect()
}

impl Checkpoint {
    pub fn model_only(model: EncoderModel) -> Self {
        Self {
            model,
            step: 0,
            config_hash: None,
            adam: None,
            rng: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let mut payload = Vec::new();
        let mut push = |values: &[f64]| {
            for v in values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in params {
            push(p.data());
        }
        if let Some(adam) = &self.adam {
            let (m, v) = adam.moments();
            m.iter().for_each(|x| push(x));
            v.iter().for_each(|x| push(x));
        }
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            widths: self.model.widths().to_vec(),
            activations: self.model.activations().to_vec(),
            seed: self.model.seed(),
            step: self.step,
            config_hash: self.config_hash.clone(),
            tensors: tensor_names(params.len())
                .into_iter()
                .zip(params)
                .map(|(name, p)| TensorEntry {
                    name,
                    shape: p.shape().to_vec(),
                })
                .collect(),
            adam: self.adam.as_ref().map(|a| AdamHeader {
                step: a.step,
                learning_rate: a.learning_rate,
                beta1: a.beta1,
                beta2: a.beta2,
                epsilon: a.epsilon,
                weight_decay: a.weight_decay,
            }),
            rng: self.rng.clone(),
            payload_bytes: payload.len(),
            sha256: hex::encode(Sha256::digest(&payload)),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.extend(payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checksum(format!("{origin}: missing header line")))?;
        let header: Header = serde_json::from_slice(&bytes[..split])
            .map_err(|e| Error::Checksum(format!("{origin}: unreadable header ({e})")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::config(format!(
                "{origin}: unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        let payload = &bytes[split + 1..];
        if payload.len() != header.payload_bytes || hex::encode(Sha256::digest(payload)) != header.sha256 {
            return Err(Error::Checksum(origin.to_string()));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = values.by_ref().take(n).collect();
            if v.len() != n {
                return Err(Error::Checksum(format!("{origin}: payload too short")));
            }
            Ok(v)
        };
        let mut params = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n = t.shape.iter().product();
            params.push(Tensor::new(t.shape.clone(), take(n)?)?);
        }
        let model = EncoderModel::from_params(header.widths, header.activations, params, header.seed)?;
        let adam = match header.adam {
            None => None,
            Some(h) => {
                let lens: Vec<usize> = model.params().iter().map(Tensor::len).collect();
                let m = lens.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                let v = lens.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                let mut template = AdamState::new(model.params(), h.learning_rate, h.weight_decay);
                template.step = h.step;
                template.beta1 = h.beta1;
                template.beta2 = h.beta2;
                template.epsilon = h.epsilon;
                Some(AdamState::from_moments(template, m, v)?)
            }
        };
        Ok(Self {
            model,
            step: header.step,
            config_hash: header.config_hash,
            adam,
            rng: header.rng,
        })
    }

    /// Writes to a temporary sibling and renames, so a crash never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

pub fn save_model(model: &EncoderModel, path: &Path) -> Result<()> {
    Checkpoint::model_only(model.clone()).save(path)
}

pub fn load_model(path: &Path) -> Result<EncoderModel> {
    Ok(Checkpoint::load(path)?.model)
}
