use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Elu,
}

impl Activation {
    fn apply(self, graph: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => graph.relu(x),
            Activation::Elu => graph.elu(x, 1.0),
        }
    }
}

/// Fully connected encoder `f: R^D -> R^n`.
///
/// Parameters are stored as `[W0, b0, W1, b1, ...]` with `Wi` of shape
/// `[widths[i], widths[i + 1]]`; the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<Tensor>,
    seed: u64,
}

fn validate(widths: &[usize], activations: &[Activation]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::config("an encoder needs at least input and output widths"));
    }
    if widths.contains(&0) {
        return Err(Error::config(format!(
            "layer widths must be positive: {widths:?}"
        )));
    }
    if activations.len() != widths.len() - 2 {
        return Err(Error::config(format!(
            "{} hidden layers but {} activations",
            widths.len() - 2,
            activations.len()
        )));
    }
    Ok(())
}

impl EncoderModel {
    /// He-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        widths: Vec<usize>,
        activations: Vec<Activation>,
        seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        validate(&widths, &activations)?;
        let mut params = Vec::with_capacity(2 * (widths.len() - 1));
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(Tensor::new(vec![fan_in, fan_out], w)?);
            params.push(Tensor::zeros(vec![fan_out]));
        }
        Ok(Self {
            widths,
            activations,
            params,
            seed,
        })
    }

    pub fn from_params(
        widths: Vec<usize>,
        activations: Vec<Activation>,
        params: Vec<Tensor>,
        seed: u64,
    ) -> Result<Self> {
        validate(&widths, &activations)?;
        if params.len() != 2 * (widths.len() - 1) {
            return Err(Error::shape(format!(
                "{} parameter tensors for {} layers",
                params.len(),
                widths.len() - 1
            )));
        }
        for (layer, pair) in widths.windows(2).enumerate() {
            if params[2 * layer].shape() != [pair[0], pair[1]] {
                return Err(Error::shape(format!(
                    "layer {layer} weight has shape {:?}, expected [{}, {}]",
                    params[2 * layer].shape(),
                    pair[0],
                    pair[1]
                )));
            }
            if params[2 * layer + 1].shape() != [pair[1]] {
                return Err(Error::shape(format!("layer {layer} bias has the wrong shape")));
            }
        }
        Ok(Self {
            widths,
            activations,
            params,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| graph.param(p.clone())).collect()
    }

    /// Registers parameters as constants (no gradient flows into them).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| graph.constant(p.clone())).collect()
    }

    /// Records the forward pass for a `[B, D]` input on `graph`.
    pub fn forward_on(&self, graph: &mut Graph, params: &[Var], input: Var) -> Result<Var> {
        let (_, d) = graph.value(input).dims2()?;
        if d != self.input_dim() {
            return Err(Error::shape(format!(
                "batch has {d} columns, encoder expects {}",
                self.input_dim()
            )));
        }
        let layers = self.widths.len() - 1;
        let mut h = input;
        for layer in 0..layers {
            let z = graph.matmul(h, params[2 * layer])?;
            h = graph.add_bias(z, params[2 * layer + 1])?;
            if layer + 1 < layers {
                h = self.activations[layer].apply(graph, h);
            }
        }
        Ok(h)
    }

    /// Embeds a `[B, D]` batch without keeping a tape.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::new();
        let params = self.bind_frozen(&mut graph);
        let x = graph.constant(batch.clone());
        let out = self.forward_on(&mut graph, &params, x)?;
        Ok(graph.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn relu_oracle(model: &EncoderModel, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let layers = model.widths().len() - 1;
        for layer in 0..layers {
            let w = &model.params()[2 * layer];
            let b = model.params()[2 * layer + 1].data();
            let (din, dout) = w.dims2().unwrap();
            let mut out = vec![0.0; dout];
            for j in 0..dout {
                let mut acc = b[j];
                for i in 0..din {
                    acc += h[i] * w.data()[i * dout + j];
                }
                out[j] = if layer + 1 < layers { acc.max(0.0) } else { acc };
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_weights_give_zero_embeddings() {
        let params = vec![
            Tensor::zeros(vec![3, 4]),
            Tensor::zeros(vec![4]),
            Tensor::zeros(vec![4, 2]),
            Tensor::zeros(vec![2]),
        ];
        let m = EncoderModel::from_params(vec![3, 4, 2], vec![Activation::Relu], params, 0).unwrap();
        let x = Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]).unwrap();
        assert!(m.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let mut w = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let m = EncoderModel::from_params(vec![3, 3], vec![], vec![w, Tensor::zeros(vec![3])], 0).unwrap();
        let x = Tensor::from_rows(&[[0.1, -7.0, 2.5]]).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn two_layer_relu_matches_hand_rolled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = EncoderModel::new(vec![5, 7, 3], vec![Activation::Relu], 11, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let out = m.forward(&Tensor::from_rows(&rows).unwrap()).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let want = relu_oracle(&m, row);
            for (a, b) in out.row(i).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_width_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = EncoderModel::new(vec![4, 2], vec![], 0, &mut rng).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(m.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = EncoderModel::new(
            vec![6, 8, 2],
            vec![Activation::Elu],
            3,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let b = EncoderModel::new(
            vec![6, 8, 2],
            vec![Activation::Elu],
            3,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
