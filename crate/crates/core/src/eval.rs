//! Held-out evaluation: preservation residuals, latent ranking metrics and
//! embedding export.

use std::io::Write;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, AdamState, EncoderModel, Graph, Tensor};
use crate::decomposition::{invariance_score, DecompositionSpec};
use crate::env::{sample_batch, sample_subgroup_batch, ActionBuffers, Environment, SubgroupBatch};
use crate::error::{Error, Result};
use crate::objectives::{cosine_angle, TripleSet};

/// Added to `|before|` so relative residuals stay finite.
pub const RESIDUAL_OFFSET: f64 = 1e-8;
/// Angle triples drawn per batch for the cosine residual.
pub const COSINE_TRIPLES: usize = 4096;
/// Evaluation draws from its own stream; training uses streams 0 to 2.
pub const EVAL_STREAM: u64 = 3;

fn eval_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub count: usize,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
}

impl ResidualStats {
    /// Median (mean of the middle pair for even counts), nearest-rank p90
    /// and maximum.
    pub fn from_residuals(mut r: Vec<f64>) -> Self {
        if r.is_empty() {
            return Self {
                count: 0,
                median: f64::NAN,
                p90: f64::NAN,
                max: f64::NAN,
            };
        }
        r.sort_by(f64::total_cmp);
        let n = r.len();
        let median = if n % 2 == 1 {
            r[n / 2]
        } else {
            0.5 * (r[n / 2 - 1] + r[n / 2])
        };
        let rank = (0.9 * n as f64).ceil() as usize;
        Self {
            count: n,
            median,
            p90: r[rank.clamp(1, n) - 1],
            max: r[n - 1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreservationReport {
    pub distance: ResidualStats,
    pub inner_product: ResidualStats,
    pub cosine: ResidualStats,
}

fn residual(before: f64, after: f64) -> f64 {
    (before - after).abs() / (before.abs() + RESIDUAL_OFFSET)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Default)]
struct Residuals {
    distance: Vec<f64>,
    inner: Vec<f64>,
    cosine: Vec<f64>,
}

impl Residuals {
    /// Compares every slice `k >= 1` of a `[K + 1, B, n]` stack with slice 0
    /// over all point pairs, and over `triples` for angles.
    fn push_stack(&mut self, z_all: &Tensor, range: &Range<usize>, triples: &TripleSet) -> Result<()> {
        let (s, b, n) = z_all.dims3()?;
        if range.end > n || range.is_empty() {
            return Err(Error::shape(format!(
                "block {range:?} outside embedding width {n}"
            )));
        }
        let row = |k: usize, i: usize| &z_all.data()[(k * b + i) * n..(k * b + i + 1) * n][range.clone()];
        for k in 1..s {
            for i in 0..b {
                for j in i + 1..b {
                    self.distance
                        .push(residual(dist(row(0, i), row(0, j)), dist(row(k, i), row(k, j))));
                    self.inner
                        .push(residual(dot(row(0, i), row(0, j)), dot(row(k, i), row(k, j))));
                }
            }
            for t in triples.triples() {
                let before = cosine_angle(row(0, t.first), row(0, t.vertex), row(0, t.second));
                let after = cosine_angle(row(k, t.first), row(k, t.vertex), row(k, t.second));
                if before.is_finite() && after.is_finite() {
                    self.cosine.push(residual(before, after));
                }
            }
        }
        Ok(())
    }

    fn report(self) -> PreservationReport {
        PreservationReport {
            distance: ResidualStats::from_residuals(self.distance),
            inner_product: ResidualStats::from_residuals(self.inner),
            cosine: ResidualStats::from_residuals(self.cosine),
        }
    }
}

/// Residuals of precomputed `[K + 1, B, n]` stacks, restricted to `range`.
pub fn preservation_from_stacks<R: Rng + ?Sized>(
    stacks: &[Tensor],
    range: Range<usize>,
    rng: &mut R,
) -> Result<PreservationReport> {
    let mut acc = Residuals::default();
    for z in stacks {
        let (_, b, _) = z.dims3()?;
        let triples = TripleSet::sample(b, COSINE_TRIPLES, rng)?;
        acc.push_stack(z, &range, &triples)?;
    }
    Ok(acc.report())
}

/// Held-out sampling parameters for [`preservation_eval`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalBatches {
    pub batches: usize,
    pub batch_size: usize,
    pub transforms: usize,
    /// Seeds the evaluation stream, which never overlaps the training
    /// streams even for equal seeds.
    pub seed: u64,
}

impl Default for EvalBatches {
    fn default() -> Self {
        Self {
            batches: 8,
            batch_size: 64,
            transforms: 3,
            seed: 0x5eed_e7a1,
        }
    }
}

fn eval_stacks(
    model: &EncoderModel,
    env: &dyn Environment,
    opts: &EvalBatches,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Tensor>> {
    if opts.batches == 0 {
        return Err(Error::config("evaluation needs at least one batch"));
    }
    (0..opts.batches)
        .map(|_| {
            let batch = sample_batch(env, rng, opts.batch_size, opts.transforms)?.into_batch();
            model.forward(&batch.stacked())?.reshape(vec![
                opts.transforms + 1,
                opts.batch_size,
                model.output_dim(),
            ])
        })
        .collect()
}

/// Preservation residuals of `model` on fresh batches from `env`, for each
/// coordinate range in `blocks` (the whole embedding when empty).
pub fn preservation_eval(
    model: &EncoderModel,
    env: &dyn Environment,
    opts: &EvalBatches,
    blocks: &[Range<usize>],
) -> Result<Vec<PreservationReport>> {
    if model.input_dim() != env.obs_dim() {
        return Err(Error::shape(format!(
            "model expects {} inputs, {} observes {}",
            model.input_dim(),
            env.name(),
            env.obs_dim()
        )));
    }
    let mut rng = eval_rng(opts.seed);
    let stacks = eval_stacks(model, env, opts, &mut rng)?;
    let whole = [0..model.output_dim()];
    let blocks = if blocks.is_empty() { &whole[..] } else { blocks };
    blocks
        .iter()
        .map(|r| preservation_from_stacks(&stacks, r.clone(), &mut rng))
        .collect()
}

/// Invariance scores of a decomposed embedding on fresh subgroup batches:
/// `opts.batches` batches per subgroup.
pub fn invariance_eval(
    model: &EncoderModel,
    env: &dyn Environment,
    spec: &DecompositionSpec,
    opts: &EvalBatches,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = eval_rng(opts.seed);
    let mut batches = Vec::new();
    for subgroup in 0..spec.blocks.len() {
        for _ in 0..opts.batches {
            let batch = sample_subgroup_batch(env, &mut rng, subgroup, opts.batch_size, opts.transforms)?
                .into_batch();
            batches.push(SubgroupBatch { subgroup, batch });
        }
    }
    invariance_score(model, &batches, spec)
}

/// Ties are resolved pessimistically: the true candidate ranks behind every
/// reference at the same distance.
pub const TIE_POLICY: &str = "worst";
/// Reference observations drawn per ranking evaluation.
pub const REFERENCE_COUNT: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub hits_at_1: f64,
    pub mrr: f64,
    pub queries: usize,
    pub reference_size: usize,
    pub tie_policy: String,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Rank of `truth` among `{truth} ∪ references` by distance to `prediction`.
pub fn candidate_rank(prediction: &[f64], truth: &[f64], references: &[Vec<f64>]) -> usize {
    let d = sq_dist(prediction, truth);
    1 + references.iter().filter(|r| sq_dist(prediction, r) <= d).count()
}

/// H@1 and MRR over latent predictions; the true next latent is adjoined to
/// the reference set for each query.
pub fn rank_latents(
    predictions: &[Vec<f64>],
    truths: &[Vec<f64>],
    references: &[Vec<f64>],
) -> Result<RankingReport> {
    if predictions.is_empty() {
        return Err(Error::config("ranking needs at least one transition"));
    }
    if predictions.len() != truths.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} targets",
            predictions.len(),
            truths.len()
        )));
    }
    if references.len() < 2 {
        return Err(Error::config("ranking needs at least two reference observations"));
    }
    let mut hits = 0usize;
    let mut rr = 0.0;
    for (p, t) in predictions.iter().zip(truths) {
        let rank = candidate_rank(p, t, references);
        hits += usize::from(rank == 1);
        rr += 1.0 / rank as f64;
    }
    let q = predictions.len() as f64;
    Ok(RankingReport {
        hits_at_1: hits as f64 / q,
        mrr: rr / q,
        queries: predictions.len(),
        reference_size: references.len(),
        tie_policy: TIE_POLICY.into(),
    })
}

/// One observed transition `(x, a, x')` with `a` an action index.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub x: Vec<f64>,
    pub action: usize,
    pub x_next: Vec<f64>,
}

/// Flattens per-action buffers into labelled transitions, action by action.
pub fn transitions_from(buffers: &ActionBuffers) -> Vec<Transition> {
    let mut out = Vec::with_capacity(buffers.total());
    for a in 0..buffers.actions().len() {
        for (x, x_next) in buffers.buffer(a) {
            out.push(Transition {
                x: x.clone(),
                action: a,
                x_next: x_next.clone(),
            });
        }
    }
    out
}

/// `count` distinct observations drawn uniformly from the transitions.
pub fn sample_references<R: Rng + ?Sized>(
    transitions: &[Transition],
    count: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let count = count.min(transitions.len());
    rand::seq::index::sample(rng, transitions.len(), count)
        .into_iter()
        .map(|i| transitions[i].x.clone())
        .collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

fn embed_rows(encoder: &EncoderModel, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let d = encoder.input_dim();
    let mut data = Vec::with_capacity(xs.len() * d);
    for x in xs {
        if x.len() != d {
            return Err(Error::shape(format!(
                "observation of width {} for encoder input {d}",
                x.len()
            )));
        }
        data.extend_from_slice(x);
    }
    Ok(rows(&encoder.forward(&Tensor::new(vec![xs.len(), d], data)?)?))
}

/// Latent dynamics `z' = z + g([z, onehot(a)])` with `g` an MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionModel {
    pub net: EncoderModel,
    pub actions: usize,
}

impl TransitionModel {
    pub fn new(latent: usize, actions: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if actions == 0 {
            return Err(Error::config("a transition model needs at least one action"));
        }
        let mut widths = vec![latent + actions];
        widths.extend(hidden);
        widths.push(latent);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = EncoderModel::new(widths, vec![Activation::Relu; hidden.len()], seed, &mut rng)?;
        Ok(Self { net, actions })
    }

    pub fn latent_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn inputs(&self, z: &[Vec<f64>], actions: &[usize]) -> Result<Tensor> {
        let n = self.latent_dim();
        let mut data = Vec::with_capacity(z.len() * (n + self.actions));
        for (zi, &a) in z.iter().zip(actions) {
            if zi.len() != n || a >= self.actions {
                return Err(Error::shape(format!(
                    "latent of width {} / action {a} for a model over {n} dims and {} actions",
                    zi.len(),
                    self.actions
                )));
            }
            data.extend_from_slice(zi);
            data.extend((0..self.actions).map(|j| if j == a { 1.0 } else { 0.0 }));
        }
        Tensor::new(vec![z.len(), n + self.actions], data)
    }

    pub fn predict(&self, z: &[Vec<f64>], actions: &[usize]) -> Result<Vec<Vec<f64>>> {
        let delta = self.net.forward(&self.inputs(z, actions)?)?;
        Ok(z.iter()
            .enumerate()
            .map(|(i, zi)| zi.iter().zip(delta.row(i)).map(|(a, b)| a + b).collect())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionConfig {
    pub hidden: Vec<usize>,
    pub steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TransitionConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            steps: 2000,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Fits a [`TransitionModel`] to `(f(x), a) -> f(x')` with the encoder
/// frozen, minimizing the mean squared prediction error with Adam.
pub fn fit_transition(
    encoder: &EncoderModel,
    transitions: &[Transition],
    actions: usize,
    config: &TransitionConfig,
) -> Result<TransitionModel> {
    let mut model = TransitionModel::new(encoder.output_dim(), actions, &config.hidden, config.seed)?;
    if transitions.is_empty() {
        return Err(Error::config("no transitions to fit"));
    }
    let z = embed_rows(
        encoder,
        &transitions.iter().map(|t| t.x.as_slice()).collect::<Vec<_>>(),
    )?;
    let z_next = embed_rows(
        encoder,
        &transitions
            .iter()
            .map(|t| t.x_next.as_slice())
            .collect::<Vec<_>>(),
    )?;
    let acts: Vec<usize> = transitions.iter().map(|t| t.action).collect();
    let n = model.latent_dim();
    let mut adam = AdamState::new(model.net.params(), config.learning_rate, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let b = config.batch_size.clamp(1, transitions.len());
    for step in 0..config.steps {
        let idx = rand::seq::index::sample(&mut rng, transitions.len(), b).into_vec();
        let zb: Vec<Vec<f64>> = idx.iter().map(|&i| z[i].clone()).collect();
        let ab: Vec<usize> = idx.iter().map(|&i| acts[i]).collect();
        // residual target: the network fits z' - z
        let mut target = Vec::with_capacity(b * n);
        for &i in &idx {
            target.extend(z_next[i].iter().zip(&z[i]).map(|(a, c)| a - c));
        }
        let mut graph = Graph::new();
        let params = model.net.bind(&mut graph);
        let input = graph.constant(model.inputs(&zb, &ab)?);
        let out = model.net.forward_on(&mut graph, &params, input)?;
        let target = graph.constant(Tensor::new(vec![b, n], target)?);
        let diff = graph.sub(out, target)?;
        let sq = graph.mul(diff, diff)?;
        let total = graph.sum(sq);
        let loss = graph.scale(total, 1.0 / b as f64);
        if !graph.scalar(loss).is_finite() {
            return Err(Error::Numerical {
                step,
                reason: "non-finite transition loss".into(),
                last_checkpoint: None,
            });
        }
        graph.backward(loss)?;
        let grads: Vec<Vec<f64>> = params
            .iter()
            .zip(model.net.params())
            .map(|(v, p)| graph.grad(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
            .collect();
        let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        adam.apply(model.net.params_mut(), &refs).map_err(|e| match e {
            Error::Numerical { reason, .. } => Error::Numerical {
                step,
                reason,
                last_checkpoint: None,
            },
            other => other,
        })?;
    }
    Ok(model)
}

/// Encodes each transition and reference, predicts the next latent and
/// ranks the true next latent among the references.
pub fn rank_eval(
    transition: &TransitionModel,
    encoder: &EncoderModel,
    transitions: &[Transition],
    references: &[Vec<f64>],
) -> Result<RankingReport> {
    if transitions.is_empty() {
        return Err(Error::config("ranking needs at least one transition"));
    }
    let z = embed_rows(
        encoder,
        &transitions.iter().map(|t| t.x.as_slice()).collect::<Vec<_>>(),
    )?;
    let z_next = embed_rows(
        encoder,
        &transitions
            .iter()
            .map(|t| t.x_next.as_slice())
            .collect::<Vec<_>>(),
    )?;
    let refs = if references.is_empty() {
        Vec::new()
    } else {
        embed_rows(encoder, &references.iter().map(Vec::as_slice).collect::<Vec<_>>())?
    };
    let acts: Vec<usize> = transitions.iter().map(|t| t.action).collect();
    let pred = transition.predict(&z, &acts)?;
    rank_latents(&pred, &z_next, &refs)
}

/// Index of the row of `reference` closest to `query`; the first wins ties.
pub fn nearest_neighbor(reference: &[Vec<f64>], query: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in reference.iter().enumerate() {
        let d = sq_dist(r, query);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// For each query row, the state of its nearest reference embedding.
pub fn nearest_neighbor_states(
    reference: &[Vec<f64>],
    reference_states: &[Vec<f64>],
    queries: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    if reference.is_empty() || reference.len() != reference_states.len() {
        return Err(Error::shape(
            "nearest-neighbour lookup needs one state per reference row",
        ));
    }
    Ok(queries
        .iter()
        .map(|q| reference_states[nearest_neighbor(reference, q).expect("non-empty")].clone())
        .collect())
}

/// Smallest angle between `a` and `b` on the circle.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

/// How well nearest neighbours in embedding space recover an angle (state
/// column 0) and the sign of a velocity (state column 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub theta_circular_mae: f64,
    pub omega_sign_accuracy: f64,
    pub queries: usize,
}

pub fn angle_velocity_probe(
    reference: &[Vec<f64>],
    reference_states: &[Vec<f64>],
    queries: &[Vec<f64>],
    query_states: &[Vec<f64>],
) -> Result<ProbeReport> {
    if queries.is_empty() || queries.len() != query_states.len() {
        return Err(Error::shape("the probe needs one state per query row"));
    }
    if reference_states.iter().chain(query_states).any(|s| s.len() < 2) {
        return Err(Error::shape("probe states need an angle and a velocity"));
    }
    let predicted = nearest_neighbor_states(reference, reference_states, queries)?;
    let n = queries.len() as f64;
    let mut err = 0.0;
    let mut agree = 0usize;
    for (p, t) in predicted.iter().zip(query_states) {
        err += circular_distance(p[0], t[0]);
        agree += usize::from((p[1] >= 0.0) == (t[1] >= 0.0));
    }
    Ok(ProbeReport {
        theta_circular_mae: err / n,
        omega_sign_accuracy: agree as f64 / n,
        queries: queries.len(),
    })
}

/// Writes one CSV row per observation: embedding coordinates `z0..`, then
/// the state columns. Floats use the shortest exact representation.
pub fn export_embeddings<W: Write>(
    model: &EncoderModel,
    observations: &Tensor,
    states: &[Vec<f64>],
    state_names: &[String],
    out: W,
) -> Result<()> {
    let (count, _) = observations.dims2()?;
    if states.len() != count || states.iter().any(|s| s.len() != state_names.len()) {
        return Err(Error::shape(format!(
            "{count} observations but {} state rows of width {}",
            states.len(),
            state_names.len()
        )));
    }
    let z = model.forward(observations)?;
    let n = model.output_dim();
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = (0..n)
        .map(|i| format!("z{i}"))
        .chain(state_names.iter().cloned())
        .collect();
    w.write_record(&header)?;
    for (i, s) in states.iter().enumerate() {
        w.write_record(z.row(i).iter().chain(s).map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Parsed form of an [`export_embeddings`] file.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_embeddings<R: std::io::Read>(input: R) -> Result<EmbeddingTable> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::config(format!("bad number {f:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(EmbeddingTable { header, rows })
}
