//! Dynamically built computation tape with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list visits every node after all of its consumers. Only scalar outputs can
//! be differentiated.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Elu(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    /// Columns `start..end` of the last axis.
    NarrowLast {
        input: Var,
        start: usize,
        end: usize,
    },
    /// Entries `start..end` of the first axis.
    NarrowFirst {
        input: Var,
        start: usize,
        end: usize,
    },
    Reshape(Var),
    /// Scalar produced by a kernel that already knows its local gradient
    /// with respect to each input.
    Fused {
        inputs: Vec<Var>,
        local: Vec<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul of [{m}x{k}] by [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).len() != n {
            return Err(Error::shape(format!(
                "bias of length {} for {n} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddBias(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| elu(v, alpha)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::Elu(x, alpha), rg)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn narrow_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::shape("narrow of a rank-0 tensor"))?;
        if start >= end || end > cols {
            return Err(Error::shape(format!("column range {start}..{end} out of {cols}")));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(self.value(x).len() / cols * width);
        for row in self.value(x).data().chunks_exact(cols) {
            data.extend_from_slice(&row[start..end]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = width;
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::NarrowLast { input: x, start, end },
            rg,
        ))
    }

    pub fn narrow_first(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let lead = *shape
            .first()
            .ok_or_else(|| Error::shape("narrow of a rank-0 tensor"))?;
        if start >= end || end > lead {
            return Err(Error::shape(format!(
                "leading range {start}..{end} out of {lead}"
            )));
        }
        let inner = self.value(x).len() / lead;
        let data = self.value(x).data()[start * inner..end * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = end - start;
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::NarrowFirst { input: x, start, end },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Records a scalar computed outside the tape together with its partial
    /// derivatives with respect to `inputs`.
    pub fn fused(&mut self, inputs: &[Var], value: f64, local: Vec<Vec<f64>>) -> Result<Var> {
        if inputs.len() != local.len() {
            return Err(Error::contract("one local gradient per fused input"));
        }
        for (v, g) in inputs.iter().zip(&local) {
            if self.value(*v).len() != g.len() {
                return Err(Error::shape(format!(
                    "local gradient of length {} for input of shape {:?}",
                    g.len(),
                    self.shape(*v)
                )));
            }
        }
        let rg = self.needs(inputs);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Fused {
                inputs: inputs.to_vec(),
                local,
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = G * B^T
                acc(*a, &|slot| gemm(m, n, k, g, (n, 1), bv, (1, n), slot));
                // dB = A^T * G
                acc(*b, &|slot| gemm(k, m, n, av, (1, k), g, (n, 1), slot));
            }
            Op::AddBias(x, bias) => {
                acc(*x, &|slot| add_into(slot, g));
                let n = self.value(*bias).len();
                acc(*bias, &|slot| {
                    for row in g.chunks_exact(n) {
                        add_into(slot, row);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|slot| {
                    for ((s, &gi), &xi) in slot.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *s += gi;
                        }
                    }
                });
            }
            Op::Elu(x, alpha) => {
                let xv = self.value(*x).data();
                acc(*x, &|slot| {
                    for ((s, &gi), &xi) in slot.iter_mut().zip(g).zip(xv) {
                        *s += gi * elu_grad(xi, *alpha);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|slot| add_into(slot, g));
                acc(*b, &|slot| add_into(slot, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|slot| add_into(slot, g));
                acc(*b, &|slot| {
                    for (s, gi) in slot.iter_mut().zip(g) {
                        *s -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|slot| {
                    for ((s, gi), bi) in slot.iter_mut().zip(g).zip(bv) {
                        *s += gi * bi;
                    }
                });
                acc(*b, &|slot| {
                    for ((s, gi), ai) in slot.iter_mut().zip(g).zip(av) {
                        *s += gi * ai;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|slot| {
                for (s, gi) in slot.iter_mut().zip(g) {
                    *s += gi * c;
                }
            }),
            Op::Sum(x) => acc(*x, &|slot| {
                for s in slot.iter_mut() {
                    *s += g[0];
                }
            }),
            Op::NarrowLast { input, start, end } => {
                let cols = *self.shape(*input).last().unwrap();
                let width = end - start;
                acc(*input, &|slot| {
                    for (dst, src) in slot.chunks_exact_mut(cols).zip(g.chunks_exact(width)) {
                        add_into(&mut dst[*start..*end], src);
                    }
                });
            }
            Op::NarrowFirst { input, start, end } => {
                let lead = self.shape(*input)[0];
                let inner = self.value(*input).len() / lead;
                acc(*input, &|slot| add_into(&mut slot[start * inner..end * inner], g));
            }
            Op::Reshape(x) => acc(*x, &|slot| add_into(slot, g)),
            Op::Fused { inputs, local } => {
                for (v, l) in inputs.iter().zip(local) {
                    acc(*v, &|slot| {
                        for (s, li) in slot.iter_mut().zip(l) {
                            *s += g[0] * li;
                        }
                    });
                }
            }
        }
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of a node's value with its gradient attached.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.value(v).clone();
        if let Some(g) = self.grad(v) {
            t.set_grad(g.to_vec()).expect("gradient matches value");
        }
        t
    }
}

pub(crate) fn elu(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        alpha * x.exp_m1()
    }
}

fn elu_grad(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        alpha * x.exp()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `c += a * b` for an `m x k` by `k x n` product with explicit
/// (row, column) strides on the operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserted lengths cover every index reachable with the
    // given dimensions and strides; `c` is a distinct mutable buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
