//! Objective for data labelled with the group element that produced each
//! transformation.

use serde::{Deserialize, Serialize};

use super::LossEval;
use crate::autodiff::{EncoderModel, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Latent action of one known group element: `z -> matrix * z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentAction {
    pub element: u32,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InformedTriple {
    pub x: Vec<f64>,
    pub element: u32,
    pub x_t: Vec<f64>,
}

fn lookup(actions: &[LatentAction], element: u32) -> Result<&LatentAction> {
    actions
        .iter()
        .find(|a| a.element == element)
        .ok_or_else(|| Error::config(format!("no latent action registered for element {element}")))
}

pub fn validate_actions(actions: &[LatentAction], n: usize) -> Result<()> {
    for a in actions {
        if a.matrix.len() != n || a.matrix.iter().any(|r| r.len() != n) {
            return Err(Error::shape(format!(
                "latent action for element {} must be {n}x{n}",
                a.element
            )));
        }
    }
    Ok(())
}

/// `sum_i |zt_i - A_{g_i} z_i|^2`; `grads` are with respect to `z` and `zt`.
pub fn informed_terms(
    z: &Tensor,
    zt: &Tensor,
    elements: &[u32],
    actions: &[LatentAction],
) -> Result<LossEval> {
    let (rows, n) = z.dims2()?;
    if zt.shape() != z.shape() || elements.len() != rows {
        return Err(Error::shape(
            "informed loss needs aligned z, z_t and element labels",
        ));
    }
    validate_actions(actions, n)?;
    let mut gz = vec![0.0; z.len()];
    let mut gzt = vec![0.0; zt.len()];
    let mut value = 0.0;
    let mut resid = vec![0.0; n];
    for (i, &g) in elements.iter().enumerate() {
        let a = &lookup(actions, g)?.matrix;
        let zi = z.row(i);
        for r in 0..n {
            let az: f64 = a[r].iter().zip(zi).map(|(x, y)| x * y).sum();
            resid[r] = zt.row(i)[r] - az;
            value += resid[r] * resid[r];
        }
        for r in 0..n {
            gzt[i * n + r] += 2.0 * resid[r];
            for c in 0..n {
                gz[i * n + c] -= 2.0 * a[r][c] * resid[r];
            }
        }
    }
    Ok(LossEval {
        value,
        grads: vec![gz, gzt],
        skipped: 0,
    })
}

fn stack_inputs(triples: &[InformedTriple], d: usize) -> Result<(Tensor, Tensor)> {
    let mut xs = Vec::with_capacity(triples.len() * d);
    let mut xts = Vec::with_capacity(triples.len() * d);
    for t in triples {
        if t.x.len() != d || t.x_t.len() != d {
            return Err(Error::shape(format!("triple observation is not of length {d}")));
        }
        xs.extend_from_slice(&t.x);
        xts.extend_from_slice(&t.x_t);
    }
    Ok((
        Tensor::new(vec![triples.len(), d], xs)?,
        Tensor::new(vec![triples.len(), d], xts)?,
    ))
}

/// Records the informed loss of `model` on `triples` onto `graph`.
pub fn informed_loss_on(
    graph: &mut Graph,
    model: &EncoderModel,
    params: &[Var],
    triples: &[InformedTriple],
    actions: &[LatentAction],
) -> Result<Var> {
    if triples.is_empty() {
        return Err(Error::contract("informed loss over an empty triple set"));
    }
    let (x, xt) = stack_inputs(triples, model.input_dim())?;
    let x = graph.constant(x);
    let xt = graph.constant(xt);
    let z = model.forward_on(graph, params, x)?;
    let zt = model.forward_on(graph, params, xt)?;
    let elements: Vec<u32> = triples.iter().map(|t| t.element).collect();
    let eval = informed_terms(graph.value(z), graph.value(zt), &elements, actions)?;
    graph.fused(&[z, zt], eval.value, eval.grads)
}

/// Value of the informed loss for a fixed model.
pub fn informed_loss(
    model: &EncoderModel,
    triples: &[InformedTriple],
    actions: &[LatentAction],
) -> Result<f64> {
    let mut graph = Graph::new();
    let params = model.bind_frozen(&mut graph);
    let v = informed_loss_on(&mut graph, model, &params, triples, actions)?;
    Ok(graph.scalar(v))
}
