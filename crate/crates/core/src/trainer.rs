//! Seeded training loop with checkpointing and an append-only run record.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, EncoderModel, Graph, Var};
use crate::checkpoint::{Checkpoint, RngStates};
use crate::config::TrainConfig;
use crate::decomposition::{active_loss_on, embed_stack, passive_loss_on, DecompositionMode};
use crate::env::{sample_batch, sample_subgroup_batch, Environment};
use crate::error::{Error, Result};
use crate::objectives::barrier_terms;

pub const RECORD_FILE: &str = "run.ndjson";
pub const TIMING_FILE: &str = "timing.ndjson";
pub const CONFIG_FILE: &str = "config.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

const INIT_STREAM: u64 = 0;
const SAMPLING_STREAM: u64 = 1;
const TRIPLE_STREAM: u64 = 2;

/// One line of the run record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    Start {
        name: String,
        config_hash: String,
        config: TrainConfig,
    },
    Resume {
        from_step: u64,
        config_hash: String,
    },
    Step {
        step: u64,
        symmetry: f64,
        /// Unweighted barrier value.
        barrier: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        invariance: Option<f64>,
        total: f64,
        learning_rate: f64,
    },
    /// `path` is relative to the output directory.
    Checkpoint {
        step: u64,
        path: String,
    },
    Finish {
        step: u64,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub events: Vec<RunEvent>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub step: u64,
    pub symmetry: f64,
    pub barrier: f64,
    pub invariance: Option<f64>,
    pub total: f64,
    pub learning_rate: f64,
}

impl RunRecord {
    pub fn steps(&self) -> Vec<StepLosses> {
        self.events
            .iter()
            .filter_map(|e| match *e {
                RunEvent::Step {
                    step,
                    symmetry,
                    barrier,
                    invariance,
                    total,
                    learning_rate,
                } => Some(StepLosses {
                    step,
                    symmetry,
                    barrier,
                    invariance,
                    total,
                    learning_rate,
                }),
                _ => None,
            })
            .collect()
    }

    pub fn checkpoints(&self) -> Vec<(u64, String)> {
        self.events
            .iter()
            .filter_map(|e| match e {
                RunEvent::Checkpoint { step, path } => Some((*step, path.clone())),
                _ => None,
            })
            .collect()
    }

    pub fn to_ndjson(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&serde_json::to_string(e).expect("event serializes"));
            s.push('\n');
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut events = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                events.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { events })
    }

    /// Keeps only what a run resumed from `step` would have produced.
    fn truncate_to(&mut self, step: u64) {
        self.events.retain(|e| match e {
            RunEvent::Step { step: s, .. } => *s < step,
            RunEvent::Checkpoint { step: s, .. } => *s <= step,
            RunEvent::Finish { .. } => false,
            _ => true,
        });
    }
}

pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: EncoderModel,
}

/// Appends events to memory and, when an output directory is set, to disk.
struct Recorder {
    record: RunRecord,
    file: Option<BufWriter<File>>,
    timing: Option<BufWriter<File>>,
    started: Instant,
}

impl Recorder {
    fn open(out: Option<&Path>, record: RunRecord) -> Result<Self> {
        let (file, timing) = match out {
            None => (None, None),
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let mut f = BufWriter::new(File::create(dir.join(RECORD_FILE))?);
                f.write_all(record.to_ndjson().as_bytes())?;
                let t = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join(TIMING_FILE))?;
                (Some(f), Some(BufWriter::new(t)))
            }
        };
        Ok(Self {
            record,
            file,
            timing,
            started: Instant::now(),
        })
    }

    fn push(&mut self, event: RunEvent) -> Result<()> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &event)?;
            f.write_all(b"\n")?;
        }
        self.record.events.push(event);
        Ok(())
    }

    fn mark(&mut self, step: u64) -> Result<()> {
        if let Some(t) = &mut self.timing {
            let ms = self.started.elapsed().as_secs_f64() * 1e3;
            writeln!(t, "{{\"step\":{step},\"elapsed_ms\":{ms:.3}}}")?;
        }
        self.flush()
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        if let Some(t) = &mut self.timing {
            t.flush()?;
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Training state for one run.
pub struct Trainer {
    config: TrainConfig,
    config_hash: String,
    env: Box<dyn Environment>,
    model: EncoderModel,
    adam: AdamState,
    sampling: ChaCha8Rng,
    triples: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let env = config.env.build()?;
        let mut init = stream(config.seed, INIT_STREAM);
        let model = EncoderModel::new(
            config.widths(env.obs_dim()),
            vec![config.encoder.activation; config.encoder.hidden.len()],
            config.seed,
            &mut init,
        )?;
        let adam = AdamState::new(model.params(), config.learning_rate, config.weight_decay);
        Ok(Self {
            config: config.clone(),
            config_hash: config.content_hash(),
            env,
            model,
            adam,
            sampling: stream(config.seed, SAMPLING_STREAM),
            triples: stream(config.seed, TRIPLE_STREAM),
            step: 0,
        })
    }

    /// Restores model, optimizer and random streams from `checkpoint`.
    pub fn from_checkpoint(config: &TrainConfig, checkpoint: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config)?;
        let found = checkpoint.config_hash.clone().unwrap_or_default();
        if found != t.config_hash {
            return Err(Error::HashMismatch {
                expected: t.config_hash.clone(),
                found,
            });
        }
        let (Some(adam), Some(rng)) = (&checkpoint.adam, &checkpoint.rng) else {
            return Err(Error::config("checkpoint carries no optimizer state"));
        };
        if checkpoint.model.widths() != t.model.widths() {
            return Err(Error::shape("checkpoint architecture differs from config"));
        }
        t.model = checkpoint.model.clone();
        t.adam = adam.clone();
        t.sampling = rng.sampling.clone();
        t.triples = rng.triples.clone();
        t.step = checkpoint.step;
        Ok(t)
    }

    pub fn model(&self) -> &EncoderModel {
        &self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            step: self.step,
            config_hash: Some(self.config_hash.clone()),
            adam: Some(self.adam.clone()),
            rng: Some(RngStates {
                sampling: self.sampling.clone(),
                triples: self.triples.clone(),
            }),
        }
    }

    /// Barrier over the base rows of a `[K + 1, B, n]` stack; returns the
    /// weighted node and the unweighted value.
    fn barrier_on(&self, graph: &mut Graph, z_all: Var) -> Result<(Var, f64)> {
        let shape = graph.shape(z_all).to_vec();
        let base = graph.narrow_first(z_all, 0, 1)?;
        let base = graph.reshape(base, vec![shape[1], shape[2]])?;
        let spec = &self.config.barrier;
        let eval = barrier_terms(graph.value(base), spec.kind, spec.reduction)?;
        if eval.skipped > 0 {
            log::debug!(
                "step {}: {} embedding pairs at the distance floor",
                self.step,
                eval.skipped
            );
        }
        let raw = eval.value;
        let weighted = eval.scaled(spec.coefficient);
        Ok((graph.fused(&[base], weighted.value, weighted.grads)?, raw))
    }

    /// Samples one mini-batch, records the full objective and backpropagates.
    fn losses(&mut self, graph: &mut Graph, params: &[Var]) -> Result<(StepLosses, Var)> {
        let (b, k) = (self.config.batch_size, self.config.transforms);
        let env = self.env.as_ref();
        let mut barrier_nodes = Vec::new();
        let mut barrier = 0.0;
        let (symmetry, invariance, total_sym) = match (&self.config.objective, &self.config.decomposition) {
            (Some(obj), None) => {
                let batch = sample_batch(env, &mut self.sampling, b, k)?.into_batch();
                let z = embed_stack(graph, &self.model, params, &batch)?;
                let (node, raw) = self.barrier_on(graph, z)?;
                barrier_nodes.push(node);
                barrier += raw;
                let sym = obj.stack_loss_on(graph, z, &mut self.triples)?;
                (sym, None, sym)
            }
            (None, Some(dec)) if dec.mode == DecompositionMode::Passive => {
                let batch = sample_batch(env, &mut self.sampling, b, k)?.into_batch();
                let z = embed_stack(graph, &self.model, params, &batch)?;
                let (node, raw) = self.barrier_on(graph, z)?;
                barrier_nodes.push(node);
                barrier += raw;
                let sym = passive_loss_on(graph, z, dec, &mut self.triples)?;
                (sym, None, sym)
            }
            (None, Some(dec)) => {
                let mut stacks = Vec::with_capacity(dec.blocks.len());
                for i in 0..dec.blocks.len() {
                    let batch = sample_subgroup_batch(env, &mut self.sampling, i, b, k)?.into_batch();
                    let z = embed_stack(graph, &self.model, params, &batch)?;
                    let (node, raw) = self.barrier_on(graph, z)?;
                    barrier_nodes.push(node);
                    barrier += raw;
                    stacks.push((i, z));
                }
                let terms = active_loss_on(graph, &stacks, dec, &mut self.triples)?;
                (terms.symmetry, Some(terms.invariance), terms.total)
            }
            _ => {
                return Err(Error::config(
                    "set exactly one of `objective` and `decomposition`",
                ))
            }
        };
        let mut total = total_sym;
        for n in barrier_nodes {
            total = graph.add(total, n)?;
        }
        let losses = StepLosses {
            step: self.step,
            symmetry: graph.scalar(symmetry),
            barrier,
            invariance: invariance.map(|v| graph.scalar(v)),
            total: graph.scalar(total),
            learning_rate: self.adam.learning_rate,
        };
        Ok((losses, total))
    }

    /// One optimizer step.
    pub fn train_step(&mut self) -> Result<StepLosses> {
        self.adam.learning_rate = self.config.schedule.rate(self.config.learning_rate, self.step);
        let mut graph = Graph::new();
        let params = self.model.bind(&mut graph);
        let (losses, total) = self.losses(&mut graph, &params)?;
        if !losses.total.is_finite() {
            return Err(Error::Numerical {
                step: self.step,
                reason: format!("non-finite loss {:?}", losses),
                last_checkpoint: None,
            });
        }
        graph.backward(total)?;
        let grads: Vec<Vec<f64>> = params
            .iter()
            .zip(self.model.params())
            .map(|(v, p)| graph.grad(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
            .collect();
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        self.adam
            .apply(self.model.params_mut(), &refs)
            .map_err(|e| match e {
                Error::Numerical { reason, .. } => Error::Numerical {
                    step: self.step,
                    reason,
                    last_checkpoint: None,
                },
                other => other,
            })?;
        self.step += 1;
        Ok(losses)
    }

    /// Trains up to `config.steps`, recording into `out` when given.
    fn run(mut self, out: Option<&Path>, record: RunRecord) -> Result<TrainOutcome> {
        let mut rec = Recorder::open(out, record)?;
        let mut last_checkpoint: Option<PathBuf> = None;
        let mut last_saved = None;
        while self.step < self.config.steps {
            let losses = match self.train_step() {
                Ok(l) => l,
                Err(Error::Numerical { step, reason, .. }) => {
                    rec.flush()?;
                    log::error!("numerical abort at step {step}: {reason}");
                    return Err(Error::Numerical {
                        step,
                        reason,
                        last_checkpoint,
                    });
                }
                Err(e) => return Err(e),
            };
            rec.push(RunEvent::Step {
                step: losses.step,
                symmetry: losses.symmetry,
                barrier: losses.barrier,
                invariance: losses.invariance,
                total: losses.total,
                learning_rate: losses.learning_rate,
            })?;
            if self.step.is_multiple_of(self.config.checkpoint_every) {
                if let Some(dir) = out {
                    last_checkpoint = Some(self.save_checkpoint(dir, &mut rec)?);
                    last_saved = Some(self.step);
                }
                log::info!("step {} total {:.6e}", self.step, losses.total);
            }
        }
        if let Some(dir) = out {
            if last_saved != Some(self.step) {
                self.save_checkpoint(dir, &mut rec)?;
            }
            Checkpoint::model_only(self.model.clone()).save(&dir.join(MODEL_FILE))?;
        }
        rec.push(RunEvent::Finish { step: self.step })?;
        rec.mark(self.step)?;
        Ok(TrainOutcome {
            record: rec.record,
            model: self.model,
        })
    }

    fn save_checkpoint(&self, dir: &Path, rec: &mut Recorder) -> Result<PathBuf> {
        let rel = format!("{CHECKPOINT_DIR}/step_{:08}.ckpt", self.step);
        let path = dir.join(&rel);
        self.checkpoint().save(&path)?;
        rec.push(RunEvent::Checkpoint {
            step: self.step,
            path: rel,
        })?;
        rec.mark(self.step)?;
        Ok(path)
    }
}

/// Trains from scratch. With `out`, writes the effective config, the run
/// record, a timing sidecar, periodic checkpoints and the final model.
pub fn train(config: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let trainer = Trainer::new(config)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), config.to_pretty_json())?;
        let _ = fs::remove_file(dir.join(TIMING_FILE));
    }
    let start = RunRecord {
        events: vec![RunEvent::Start {
            name: config.name.clone(),
            config_hash: trainer.config_hash.clone(),
            config: config.clone(),
        }],
    };
    trainer.run(out, start)
}

/// Continues the run saved in `checkpoint` up to `config.steps`. The
/// existing record in `out` is cut back to the checkpoint step first, so
/// the resulting curve matches an uninterrupted run.
pub fn resume(config: &TrainConfig, checkpoint: &Path, out: Option<&Path>) -> Result<TrainOutcome> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let trainer = Trainer::from_checkpoint(config, &ckpt)?;
    let existing = out
        .map(|d| d.join(RECORD_FILE))
        .filter(|p| p.is_file())
        .map(|p| RunRecord::read(&p))
        .transpose()?;
    if trainer.step >= config.steps {
        log::info!("run already reached step {}; nothing to do", trainer.step);
        return Ok(TrainOutcome {
            record: existing.unwrap_or_default(),
            model: trainer.model,
        });
    }
    let mut record = existing.unwrap_or_default();
    record.truncate_to(trainer.step);
    record.events.push(RunEvent::Resume {
        from_step: trainer.step,
        config_hash: trainer.config_hash.clone(),
    });
    if let Some(dir) = out {
        fs::write(dir.join(CONFIG_FILE), config.to_pretty_json())?;
    }
    trainer.run(out, record)
}
