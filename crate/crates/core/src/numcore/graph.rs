//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! creation order, so reverse creation order is a valid topological order
//! for the backward sweep. Parameters are borrowed from a [`ParamStore`]
//! and registered once per graph, so every use of a parameter accumulates
//! into the same gradient slot.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
    Select(Var, usize),
    Dropout(Var, Vec<f64>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    store: Option<&'a ParamStore>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    /// Gradient-recording graph without a parameter store.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(store: &'a ParamStore, grad_enabled: bool) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            params: HashMap::new(),
            grad_enabled,
        }
    }

    /// Forward-only graph: nothing is kept for backward.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::with_params(store, false)
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, parents: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        self.push(Cow::Owned(value), op, parents)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf owned by the graph (used by tests and ad-hoc optimisation).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register (once) and return the leaf for a stored parameter.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::broadcast_binary(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push_owned(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::broadcast_binary(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push_owned(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::broadcast_binary(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push_owned(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push_owned(out, Op::Scale(a, s), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b), false)?;
        Ok(self.push_owned(out, Op::MatMul { a, b, trans_b: false }, &[a, b]))
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b), true)?;
        Ok(self.push_owned(out, Op::MatMul { a, b, trans_b: true }, &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push_owned(out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = kernels::permute(self.value(a), perm)?;
        Ok(self.push_owned(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(a), axis)?;
        Ok(self.push_owned(out, Op::Softmax(a, axis), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (y, xhat, rstd) =
            kernels::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push_owned(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        self.push_owned(out, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push_owned(out, Op::Relu(a), &[a])
    }

    /// Gather rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding", t.shape(), &[]));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding id",
                    index: id,
                    limit: vocab,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push_owned(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean negative log-softmax over rows whose target is not `ignore_index`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != targets.len() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let vocab = lv.shape()[1];
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        let mut kept = Vec::with_capacity(targets.len());
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore_index {
                kept.push(None);
                continue;
            }
            if t >= vocab {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    limit: vocab,
                });
            }
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            kernels::log_softmax_row(row);
            total -= row[t];
            for v in row.iter_mut() {
                *v = v.exp();
            }
            count += 1;
            kept.push(Some(t));
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push_owned(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: kept,
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push_owned(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.len().max(1) as f64;
        self.push_owned(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Single element (flat index) as a shape-`[1]` tensor.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        if index >= t.len() {
            return Err(Error::Index {
                what: "select",
                index,
                limit: t.len(),
            });
        }
        let v = t.data()[index];
        Ok(self.push_owned(Tensor::scalar(v), Op::Select(a, index), &[a]))
    }

    /// Inverted dropout. A no-op when `p == 0` or the graph does not record gradients.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 || !self.grad_enabled {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push_owned(out, Op::Dropout(a, mask), &[a])
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::shape("backward", out.value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(&delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, kernels::reduce_to_shape(g, out_shape, nodes[a.0].value.shape()));
                acc(*b, kernels::reduce_to_shape(g, out_shape, nodes[b.0].value.shape()));
            }
            Op::Sub(a, b) => {
                acc(*a, kernels::reduce_to_shape(g, out_shape, nodes[a.0].value.shape()));
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                acc(*b, kernels::reduce_to_shape(&neg, out_shape, nodes[b.0].value.shape()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let gt = Tensor::new(out_shape.to_vec(), g.to_vec()).expect("grad shape");
                if nodes[a.0].needs_grad {
                    let ga = gt.mul(bv).expect("broadcast");
                    acc(*a, kernels::reduce_to_shape(ga.data(), out_shape, av.shape()));
                }
                if nodes[b.0].needs_grad {
                    let gb = gt.mul(av).expect("broadcast");
                    acc(*b, kernels::reduce_to_shape(gb.data(), out_shape, bv.shape()));
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::MatMul { a, b, trans_b } => {
                let (ga, gb) = kernels::matmul_backward(
                    &nodes[a.0].value,
                    &nodes[b.0].value,
                    *trans_b,
                    g,
                    out_shape,
                );
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Permute(a, perm) => {
                let gt = Tensor::new(out_shape.to_vec(), g.to_vec()).expect("grad shape");
                let inv = kernels::inverse_permutation(perm);
                acc(*a, kernels::permute(&gt, &inv).expect("valid perm").into_data());
            }
            Op::Softmax(a, axis) => acc(*a, kernels::softmax_backward(&node.value, g, *axis)),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (gx, gg, gb) =
                    kernels::layer_norm_backward(xhat, rstd, nodes[gain.0].value.data(), g);
                acc(*x, gx);
                acc(*gain, gg);
                acc(*bias, gb);
            }
            Op::Gelu(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, x.iter().zip(g).map(|(&x, g)| g * kernels::gelu_grad(x)).collect());
            }
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, x.iter().zip(g).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect());
            }
            Op::Embedding { table, ids } => {
                let tv = &nodes[table.0].value;
                let d = tv.shape()[1];
                let mut gt = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
                acc(*table, gt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = nodes[logits.0].value.shape()[1];
                let mut gl = vec![0.0; probs.len()];
                if *count > 0 {
                    let scale = g[0] / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        for (o, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *o = p * scale;
                        }
                        row[t] -= scale;
                    }
                }
                acc(*logits, gl);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; nodes[a.0].value.len()]),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len();
                acc(*a, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::Select(a, index) => {
                let mut ga = vec![0.0; nodes[a.0].value.len()];
                ga[*index] = g[0];
                acc(*a, ga);
            }
            Op::Dropout(a, mask) => acc(*a, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient buffer of a node, if it was reached by the sweep.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when unreached.
    pub fn get_or_zero(&self, v: Var, graph: &Graph<'_>) -> Tensor {
        let shape = graph.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Add every parameter gradient into `into` (indexed by [`ParamId`]).
    pub fn accumulate_params(&self, into: &mut ParamGrads) {
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                into.add(id, g);
            }
        }
    }
}

/// Per-parameter gradient buffers, aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    pub fn add(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.grads[id.index()].data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.index()]
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.grads {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
