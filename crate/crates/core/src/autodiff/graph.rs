use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, Tensor};

use super::Bindings;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive applications recorded in a [`Graph`].
///
/// Binary elementwise ops broadcast their right operand when its shape, with
/// leading unit extents removed, is a suffix of the left operand's shape.
#[derive(Debug, Clone)]
pub enum Op<S> {
    Leaf { name: String, requires_grad: bool },
    Const(Tensor<S>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// Concatenation along the leading axis.
    Concat(Vec<NodeId>),
    Reshape(NodeId, Vec<usize>),
    Transpose(NodeId),
    /// Softmax over the last axis.
    Softmax(NodeId),
    /// Normalization over the last axis, no affine part.
    LayerNorm(NodeId),
    Silu(NodeId),
    /// Rows of a rank-2 table.
    Gather(NodeId, Vec<usize>),
    Scale(NodeId, S),
    Mean(NodeId),
    Sum(NodeId),
    Square(NodeId),
}

impl<S> Op<S> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Concat(_) => "concat",
            Op::Reshape(..) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm(_) => "layer_norm",
            Op::Silu(_) => "silu",
            Op::Gather(..) => "gather",
            Op::Scale(..) => "scale",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::Square(_) => "square",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Const(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
            Op::Reshape(a, _)
            | Op::Transpose(a)
            | Op::Softmax(a)
            | Op::LayerNorm(a)
            | Op::Silu(a)
            | Op::Gather(a, _)
            | Op::Scale(a, _)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::Square(a) => vec![*a],
        }
    }
}

/// Gradients of a scalar root with respect to every trainable leaf, by name.
pub type Gradients<S> = BTreeMap<String, Tensor<S>>;

/// A reverse-mode differentiation graph.
///
/// Nodes are appended in topological order by the builder methods; values
/// are computed by [`Graph::forward`] against a set of leaf bindings and
/// kept until [`Graph::reset`] so that [`Graph::backward`] can reuse them.
pub struct Graph<S: Scalar> {
    ops: Vec<Op<S>>,
    values: Vec<Option<Tensor<S>>>,
    // per-row inverse standard deviations of layer-norm nodes
    aux: Vec<Option<Vec<S>>>,
    needs_grad: Vec<bool>,
    leaves: HashMap<String, NodeId>,
    rng: ChaCha8Rng,
    forward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// Graph whose mask draws come from a ChaCha stream seeded with `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
            aux: Vec::new(),
            needs_grad: Vec::new(),
            leaves: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            forward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op<S> {
        &self.ops[id.0]
    }

    fn push(&mut self, op: Op<S>) -> NodeId {
        let needs = match &op {
            Op::Leaf { requires_grad, .. } => *requires_grad,
            Op::Const(_) => false,
            other => other.inputs().iter().any(|i| self.needs_grad[i.0]),
        };
        self.ops.push(op);
        self.values.push(None);
        self.aux.push(None);
        self.needs_grad.push(needs);
        self.forward_done = false;
        NodeId(self.ops.len() - 1)
    }

    /// Named leaf; requesting the same name twice yields the same node.
    pub fn leaf(&mut self, name: &str, requires_grad: bool) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push(Op::Leaf { name: name.to_string(), requires_grad });
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        self.leaf(name, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Const(value))
    }

    /// Constant Bernoulli keep-mask scaled by `1/keep`, drawn from the graph RNG.
    pub fn mask(&mut self, shape: &[usize], keep: f64) -> NodeId {
        let inv = S::lit(1.0 / keep);
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| if rng.gen::<f64>() < keep { inv } else { S::zero() });
        self.constant(t)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(Op::Concat(xs.to_vec()))
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(a, shape.to_vec()))
    }
    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LayerNorm(a))
    }
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Silu(a))
    }
    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> NodeId {
        self.push(Op::Gather(table, rows.to_vec()))
    }
    pub fn scale(&mut self, a: NodeId, k: S) -> NodeId {
        self.push(Op::Scale(a, k))
    }
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }

    /// `x W + b` for a row-major batch of vectors `x`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    /// Names of trainable leaves in creation order.
    pub fn param_names(&self) -> Vec<String> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                Op::Leaf { name, requires_grad: true } => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    /// Drops activations so the graph can be evaluated against new bindings.
    pub fn reset(&mut self) {
        for v in &mut self.values {
            *v = None;
        }
        for a in &mut self.aux {
            *a = None;
        }
        self.forward_done = false;
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.values[id.0].as_ref()
    }

    /// Evaluates every node in order, retaining activations for backward.
    pub fn forward(&mut self, bindings: &dyn Bindings<S>) -> Result<()> {
        self.reset();
        for idx in 0..self.ops.len() {
            let (value, aux) = self.eval_node(idx, bindings)?;
            if !value.all_finite() {
                return Err(Error::NonFinite { node: idx, op: self.ops[idx].name() });
            }
            self.values[idx] = Some(value);
            self.aux[idx] = aux;
        }
        self.forward_done = true;
        Ok(())
    }

    /// Runs [`Graph::forward`] and returns a copy of `root`'s value.
    pub fn eval(&mut self, root: NodeId, bindings: &dyn Bindings<S>) -> Result<Tensor<S>> {
        self.forward(bindings)?;
        Ok(self.values[root.0].clone().expect("evaluated"))
    }

    fn val(&self, id: NodeId) -> &Tensor<S> {
        self.values[id.0].as_ref().expect("inputs precede their consumers")
    }

    fn mismatch(&self, idx: usize, detail: String) -> Error {
        Error::ShapeMismatch(format!("node {idx} ({}): {detail}", self.ops[idx].name()))
    }

    fn eval_node(&self, idx: usize, bindings: &dyn Bindings<S>) -> Result<(Tensor<S>, Option<Vec<S>>)> {
        let op = &self.ops[idx];
        let out = match op {
            Op::Leaf { name, .. } => {
                bindings.lookup(name).ok_or_else(|| Error::UnboundLeaf(name.clone()))?.clone()
            }
            Op::Const(t) => t.clone(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if !broadcastable(x.shape(), y.shape()) {
                    return Err(self.mismatch(idx, format!("{:?} with {:?}", x.shape(), y.shape())));
                }
                let f: fn(S, S) -> S = match op {
                    Op::Add(..) => |p, q| p + q,
                    Op::Sub(..) => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                let yd = y.data();
                let m = yd.len();
                let data = x.data().iter().enumerate().map(|(i, &p)| f(p, yd[i % m])).collect();
                Tensor::new(x.shape().to_vec(), data)?
            }
            Op::MatMul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                x.matmul(y).map_err(|_| self.mismatch(idx, format!("{:?} x {:?}", x.shape(), y.shape())))?
            }
            Op::Concat(xs) => {
                let first = self.val(xs[0]);
                let tail = first.shape()[1..].to_vec();
                let mut rows = 0;
                let mut data = Vec::new();
                for &x in xs {
                    let t = self.val(x);
                    if t.shape()[1..] != tail[..] {
                        return Err(self.mismatch(idx, format!("{:?} vs {:?}", first.shape(), t.shape())));
                    }
                    rows += t.shape()[0];
                    data.extend_from_slice(t.data());
                }
                let mut shape = vec![rows];
                shape.extend(tail);
                Tensor::new(shape, data)?
            }
            Op::Reshape(a, shape) => {
                let x = self.val(*a);
                Tensor::new(shape.clone(), x.data().to_vec())
                    .map_err(|_| self.mismatch(idx, format!("{:?} to {:?}", x.shape(), shape)))?
            }
            Op::Transpose(a) => {
                let x = self.val(*a);
                x.transpose2().map_err(|_| self.mismatch(idx, format!("{:?}", x.shape())))?
            }
            Op::Softmax(a) => {
                let x = self.val(*a);
                let c = last_dim(x);
                let mut data = x.data().to_vec();
                for row in data.chunks_mut(c) {
                    let m = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
                    let mut z = S::zero();
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        z += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= z;
                    }
                }
                Tensor::new(x.shape().to_vec(), data)?
            }
            Op::LayerNorm(a) => {
                let x = self.val(*a);
                let c = last_dim(x);
                let n = S::lit(c as f64);
                let eps = S::lit(LAYER_NORM_EPS);
                let mut data = x.data().to_vec();
                let mut inv = Vec::with_capacity(data.len() / c);
                for row in data.chunks_mut(c) {
                    let mu = row.iter().fold(S::zero(), |s, &v| s + v) / n;
                    let var = row.iter().fold(S::zero(), |s, &v| s + (v - mu) * (v - mu)) / n;
                    let r = S::one() / (var + eps).sqrt();
                    for v in row.iter_mut() {
                        *v = (*v - mu) * r;
                    }
                    inv.push(r);
                }
                return Ok((Tensor::new(x.shape().to_vec(), data)?, Some(inv)));
            }
            Op::Silu(a) => self.val(*a).map(|v| v * sigmoid(v)),
            Op::Gather(table, rows) => {
                let t = self.val(*table);
                let (r, c) = t.dims2().map_err(|_| self.mismatch(idx, format!("{:?}", t.shape())))?;
                let mut data = Vec::with_capacity(rows.len() * c);
                for &i in rows {
                    if i >= r {
                        return Err(Error::VocabularyOverflow { id: i, size: r });
                    }
                    data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
                }
                Tensor::new(vec![rows.len(), c], data)
                    .map_err(|_| self.mismatch(idx, "empty gather".into()))?
            }
            Op::Scale(a, k) => self.val(*a).scale(*k),
            Op::Mean(a) => Tensor::scalar(self.val(*a).mean()),
            Op::Sum(a) => Tensor::scalar(self.val(*a).sum()),
            Op::Square(a) => self.val(*a).map(|v| v * v),
        };
        Ok((out, None))
    }

    /// Gradients of the scalar `root` with respect to every trainable leaf
    /// that feeds it. Each node is visited once, in reverse creation order.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<S>> {
        if !self.forward_done {
            return Err(Error::ForwardNotRun);
        }
        let rv = self.val(root);
        if rv.len() != 1 {
            return Err(Error::NotScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.ops.len()];
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        let mut out = Gradients::new();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.needs_grad[idx] {
                continue;
            }
            match &self.ops[idx] {
                Op::Leaf { name, requires_grad: true } => {
                    out.insert(name.clone(), g);
                }
                Op::Leaf { .. } | Op::Const(_) => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, || Ok(g.clone()))?;
                    self.accumulate(&mut grads, *b, || Ok(reduce_to(&g, self.val(*b))))?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, || Ok(g.clone()))?;
                    self.accumulate(&mut grads, *b, || Ok(reduce_to(&g, self.val(*b)).scale(-S::one())))?;
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.val(*a), self.val(*b));
                    self.accumulate(&mut grads, *a, || {
                        let yd = y.data();
                        let m = yd.len();
                        Ok(Tensor::from_fn(g.shape(), |i| g.data()[i] * yd[i % m]))
                    })?;
                    self.accumulate(&mut grads, *b, || {
                        let gx = g.mul(x)?;
                        Ok(reduce_to(&gx, y))
                    })?;
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (self.val(*a), self.val(*b));
                    let (m, k) = x.dims2()?;
                    let n = y.dims2()?.1;
                    self.accumulate(&mut grads, *a, || {
                        // dX = G Y^T
                        let yt = y.transpose2()?;
                        let mut d = vec![S::zero(); m * k];
                        matmul_into(g.data(), yt.data(), &mut d, m, n, k);
                        Tensor::new(vec![m, k], d)
                    })?;
                    self.accumulate(&mut grads, *b, || {
                        // dY = X^T G
                        let xt = x.transpose2()?;
                        let mut d = vec![S::zero(); k * n];
                        matmul_into(xt.data(), g.data(), &mut d, k, m, n);
                        Tensor::new(vec![k, n], d)
                    })?;
                }
                Op::Concat(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let len = self.val(x).len();
                        let shape = self.val(x).shape().to_vec();
                        let start = offset;
                        self.accumulate(&mut grads, x, || {
                            Tensor::new(shape, g.data()[start..start + len].to_vec())
                        })?;
                        offset += len;
                    }
                }
                Op::Reshape(a, _) => {
                    let shape = self.val(*a).shape().to_vec();
                    self.accumulate(&mut grads, *a, || g.clone().reshape(&shape))?;
                }
                Op::Transpose(a) => {
                    self.accumulate(&mut grads, *a, || g.transpose2())?;
                }
                Op::Softmax(a) => {
                    let y = self.values[idx].as_ref().expect("forward value");
                    let c = last_dim(y);
                    self.accumulate(&mut grads, *a, || {
                        let mut d = Vec::with_capacity(g.len());
                        for (gr, yr) in g.data().chunks(c).zip(y.data().chunks(c)) {
                            let dot = gr.iter().zip(yr).fold(S::zero(), |s, (&p, &q)| s + p * q);
                            d.extend(gr.iter().zip(yr).map(|(&p, &q)| q * (p - dot)));
                        }
                        Tensor::new(g.shape().to_vec(), d)
                    })?;
                }
                Op::LayerNorm(a) => {
                    let y = self.values[idx].as_ref().expect("forward value");
                    let inv = self.aux[idx].as_ref().expect("layer-norm statistics");
                    let c = last_dim(y);
                    let n = S::lit(c as f64);
                    self.accumulate(&mut grads, *a, || {
                        let mut d = Vec::with_capacity(g.len());
                        for ((gr, yr), &r) in g.data().chunks(c).zip(y.data().chunks(c)).zip(inv) {
                            let mg = gr.iter().fold(S::zero(), |s, &p| s + p) / n;
                            let mgy = gr.iter().zip(yr).fold(S::zero(), |s, (&p, &q)| s + p * q) / n;
                            d.extend(gr.iter().zip(yr).map(|(&p, &q)| r * (p - mg - q * mgy)));
                        }
                        Tensor::new(g.shape().to_vec(), d)
                    })?;
                }
                Op::Silu(a) => {
                    let x = self.val(*a);
                    self.accumulate(&mut grads, *a, || {
                        g.zip_map(x, |p, v| {
                            let s = sigmoid(v);
                            p * s * (S::one() + v * (S::one() - s))
                        })
                    })?;
                }
                Op::Gather(table, rows) => {
                    let t = self.val(*table);
                    let c = t.dims2()?.1;
                    self.accumulate(&mut grads, *table, || {
                        let mut d = Tensor::zeros(t.shape());
                        let dd = d.data_mut();
                        for (k, &i) in rows.iter().enumerate() {
                            for j in 0..c {
                                dd[i * c + j] += g.data()[k * c + j];
                            }
                        }
                        Ok(d)
                    })?;
                }
                Op::Scale(a, k) => {
                    self.accumulate(&mut grads, *a, || Ok(g.scale(*k)))?;
                }
                Op::Mean(a) => {
                    let x = self.val(*a);
                    let v = g.item() / S::lit(x.len() as f64);
                    self.accumulate(&mut grads, *a, || Ok(Tensor::full(x.shape(), v)))?;
                }
                Op::Sum(a) => {
                    let x = self.val(*a);
                    self.accumulate(&mut grads, *a, || Ok(Tensor::full(x.shape(), g.item())))?;
                }
                Op::Square(a) => {
                    let x = self.val(*a);
                    let two = S::lit(2.0);
                    self.accumulate(&mut grads, *a, || g.zip_map(x, |p, v| two * v * p))?;
                }
            }
        }
        Ok(out)
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<S>>],
        target: NodeId,
        contribution: impl FnOnce() -> Result<Tensor<S>>,
    ) -> Result<()> {
        if !self.needs_grad[target.0] {
            return Ok(());
        }
        let c = contribution()?;
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(c.data()) {
                    *e += *v;
                }
            }
            slot @ None => *slot = Some(c),
        }
        Ok(())
    }
}

fn sigmoid<S: Scalar>(v: S) -> S {
    S::one() / (S::one() + (-v).exp())
}

fn last_dim<S: Scalar>(t: &Tensor<S>) -> usize {
    *t.shape().last().expect("rank >= 1")
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let first = b.iter().position(|&d| d != 1).unwrap_or(b.len());
    let core = &b[first..];
    core.len() <= a.len() && a[a.len() - core.len()..] == *core
}

/// Sums a broadcast gradient back down to the operand's shape.
fn reduce_to<S: Scalar>(g: &Tensor<S>, operand: &Tensor<S>) -> Tensor<S> {
    if g.len() == operand.len() {
        return Tensor::new(operand.shape().to_vec(), g.data().to_vec()).expect("same length");
    }
    let m = operand.len();
    let mut d = Tensor::zeros(operand.shape());
    let dd = d.data_mut();
    for (i, &v) in g.data().iter().enumerate() {
        dd[i % m] += v;
    }
    d
}
