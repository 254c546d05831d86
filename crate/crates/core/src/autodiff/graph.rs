use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::tensor::{axis_split, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Abs(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, axis: usize, inv_std: Vec<T> },
    Dropout { x: NodeId, mask: Vec<T> },
    MeanPool { x: NodeId, axis: usize },
    Sum(NodeId),
    Embedding { table: NodeId, ids: Vec<usize> },
    Reshape(NodeId),
    Concat { xs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: NodeId, label: usize, probs: Vec<T> },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in topological order; parameters may be borrowed
/// for the lifetime `'p` so binding them is free.
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    params: Vec<(String, NodeId)>,
    param_index: HashMap<String, NodeId>,
    params_require_grad: bool,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_C) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let t = (c * (x + T::of(GELU_C) * x * x * x)).tanh();
    T::of(0.5) * (T::one() + t)
        + T::of(0.5) * x * (T::one() - t * t) * c * (T::one() + T::of(3.0 * GELU_C) * x * x)
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// How `rhs` combines with `lhs` in elementwise binary ops.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Rows,
}

fn broadcast_mode<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.len() == a.cols() && b.rows() == 1 {
        Ok(Broadcast::Rows)
    } else {
        Err(shape_err(op, a.shape(), b.shape()))
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            params_require_grad: true,
        }
    }

    /// Controls whether subsequently bound parameters receive gradients.
    pub fn set_params_require_grad(&mut self, on: bool) {
        self.params_require_grad = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    pub fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Constant or differentiable input owned by the graph.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite("input".into()));
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Input,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Binds a named parameter. Binding the same name twice returns the first node.
    pub fn param(&mut self, name: &str, value: &'p Tensor<T>) -> NodeId {
        if let Some(&id) = self.param_index.get(name) {
            return id;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Param,
            requires_grad: self.params_require_grad,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.push((name.to_string(), id));
        self.param_index.insert(name.to_string(), id);
        id
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.param_index.get(name).copied()
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum; `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let mode = broadcast_mode("add", av, bv)?;
        let mut out = av.clone();
        let c = av.cols();
        match mode {
            Broadcast::Same => out.add_assign(bv)?,
            Broadcast::Rows => {
                for (i, x) in out.data_mut().iter_mut().enumerate() {
                    *x += bv.data()[i % c];
                }
            }
        }
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let mode = broadcast_mode("hadamard", av, bv)?;
        let c = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| match mode {
                Broadcast::Same => x * bv.data()[i],
                Broadcast::Rows => x * bv.data()[i % c],
            })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("hadamard", out, Op::Hadamard(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        let out = self.value(x).map(|v| v * factor);
        self.push("scale", out, Op::Scale(x, factor), &[x])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        let out = self.value(x).map(|v| v + c);
        self.push("add_scalar", out, Op::AddScalar(x), &[x])
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| v.abs());
        self.push("abs", out, Op::Abs(x), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| v.tanh());
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(gelu);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.shape().len() {
            invalid!("softmax axis {axis} out of range for {:?}", xv.shape());
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let mut out = xv.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| d[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for j in 0..len {
                    let e = (d[idx(j)] - m).exp();
                    d[idx(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    d[idx(j)] /= s;
                }
            }
        }
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    /// Normalizes to zero mean and unit (biased) variance along `axis`; no affine part.
    pub fn layer_norm(&mut self, x: NodeId, axis: usize, eps: T) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.shape().len() {
            invalid!("layer_norm axis {axis} out of range for {:?}", xv.shape());
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let n = T::of(len as f64);
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(outer * inner);
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mean = (0..len).map(|j| d[idx(j)]).sum::<T>() / n;
                let var = (0..len).map(|j| (d[idx(j)] - mean).powi(2)).sum::<T>() / n;
                let r = T::one() / (var + eps).sqrt();
                for j in 0..len {
                    d[idx(j)] = (d[idx(j)] - mean) * r;
                }
                inv_std.push(r);
            }
        }
        self.push("layer_norm", out, Op::LayerNorm { x, axis, inv_std }, &[x])
    }

    /// Inverted dropout with a mask drawn from `rng`. `rate == 0` is the identity.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            invalid!("dropout rate {rate} must be in [0, 1)");
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("dropout", out, Op::Dropout { x, mask }, &[x])
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_pool(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.shape().len() || xv.shape()[axis] == 0 {
            invalid!("mean_pool axis {axis} invalid for {:?}", xv.shape());
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let n = T::of(len as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += xv.data()[(o * len + j) * inner + i];
                }
            }
        }
        for v in &mut data {
            *v /= n;
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = 1;
        self.push("mean_pool", Tensor::new(shape, data)?, Op::MeanPool { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Gathers rows of `table: [V, d]` → `[ids.len(), d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(shape_err("embedding", tv.shape(), &[ids.len()]));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            invalid!("embedding id {bad} out of vocabulary of size {v}");
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tv.row_slice(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Reshape to a single row `[1, numel]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        self.reshape(x, &[1, n])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let Some(&first) = xs.first() else {
            invalid!("concat of zero tensors");
        };
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            invalid!("concat axis {axis} out of range for {base:?}");
        }
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::new(shape, data)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.shape().len() || start + len > xv.shape()[axis] {
            invalid!("slice {start}..{} on axis {axis} out of range for {:?}", start + len, xv.shape());
        }
        let (outer, ext, inner) = axis_split(xv.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        self.push("slice", Tensor::new(shape, data)?, Op::Slice { x, axis, start }, &[x])
    }

    /// Multi-head scaled dot-product attention over `q: [Tq, D]`, `k, v: [Tk, D]`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape().len() != 2 || kv.shape() != vv.shape() || kv.shape().len() != 2 || qv.shape()[1] != kv.shape()[1] {
            return Err(shape_err("attention", qv.shape(), kv.shape()));
        }
        let (tq, dm) = (qv.shape()[0], qv.shape()[1]);
        let tk = kv.shape()[0];
        if heads == 0 || dm % heads != 0 {
            invalid!("attention width {dm} is not divisible by {heads} heads");
        }
        let dh = dm / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * tq * tk];
        let mut out = vec![T::zero(); tq * dm];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let qi = &qv.data()[i * dm + off..i * dm + off + dh];
                let row = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let mut m = T::neg_infinity();
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &kv.data()[j * dm + off..j * dm + off + dh];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    *r = s;
                    m = m.max(s);
                }
                let mut z = T::zero();
                for r in row.iter_mut() {
                    *r = (*r - m).exp();
                    z += *r;
                }
                for r in row.iter_mut() {
                    *r /= z;
                }
                let oi = &mut out[i * dm + off..i * dm + off + dh];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &vv.data()[j * dm + off..j * dm + off + dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        let out = Tensor::new(vec![tq, dm], out)?;
        self.push(
            "attention",
            out,
            Op::Attention { q, k, v, heads, probs },
            &[q, k, v],
        )
    }

    /// Attention probabilities `[heads, Tq, Tk]` saved by an attention node.
    pub fn attention_probs(&self, node: NodeId) -> Option<(usize, usize, usize, &[T])> {
        match &self.nodes[node.0].op {
            Op::Attention { heads, probs, .. } => {
                let tq = self.value(node).shape()[0];
                let tk = probs.len() / (heads * tq);
                Some((*heads, tq, tk, probs))
            }
            _ => None,
        }
    }

    /// Head-averaged attention row of query `query` from an attention node.
    pub fn attention_row(&self, node: NodeId, query: usize) -> Option<Vec<T>> {
        let (heads, tq, tk, probs) = self.attention_probs(node)?;
        if query >= tq {
            return None;
        }
        let mut row = vec![T::zero(); tk];
        for h in 0..heads {
            for (j, r) in row.iter_mut().enumerate() {
                *r += probs[(h * tq + query) * tk + j];
            }
        }
        let n = T::of(heads as f64);
        row.iter_mut().for_each(|r| *r /= n);
        Some(row)
    }

    /// `-log softmax(logits)[label]`, max-shifted.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let z = self.value(logits).data();
        if label >= z.len() {
            invalid!("label {label} out of range for {} logits", z.len());
        }
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let s: T = z.iter().map(|&x| (x - m).exp()).sum();
        let lse = m + s.ln();
        let probs: Vec<T> = z.iter().map(|&x| (x - lse).exp()).collect();
        let loss = lse - z[label];
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, label, probs },
            &[logits],
        )
    }

    /// Backpropagates from a scalar node with seed 1.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            invalid!("loss must be scalar, got shape {:?}", self.shape(loss));
        }
        self.backward_from(loss, Tensor::full(self.shape(loss), T::one()))
    }

    /// Backpropagates an arbitrary cotangent `seed` from `output`.
    pub fn backward_from(&self, output: NodeId, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(shape_err("backward seed", self.shape(output), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.vjp(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.params.iter().map(|(_, id)| self.shape(*id).to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) -> Result<()> {
        if !self.nodes[id.0].requires_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn vjp(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = self.nodes[i].value.as_ref();
        match &self.nodes[i].op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_nt_acc(g.data(), bv.data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?)?;
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm_tn_acc(av.data(), g.data(), &mut gb, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb)?)?;
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.clone())?;
                }
                if self.needs(*b) {
                    let gb = self.reduce_broadcast(g, self.value(*b));
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let same = av.shape() == bv.shape();
                let c = av.cols();
                if self.needs(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &x)| x * bv.data()[if same { j } else { j % c }])
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), data)?)?;
                }
                if self.needs(*b) {
                    let prod = Tensor::new(
                        av.shape().to_vec(),
                        g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect(),
                    )?;
                    let gb = self.reduce_broadcast(&prod, bv);
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Scale(x, f) => {
                let f = *f;
                self.accumulate(grads, *x, g.map(|v| v * f))?;
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| {
                        if v > T::zero() {
                            gv
                        } else if v < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
            }
            Op::Tanh(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), data)?)?;
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| gv * gelu_grad(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let (y, gd) = (out.data(), g.data());
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + ii;
                        let dot: T = (0..len).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), gx)?)?;
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let n = T::of(len as f64);
                let (y, gd) = (out.data(), g.data());
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + ii;
                        let mg: T = (0..len).map(|j| gd[idx(j)]).sum::<T>() / n;
                        let mgy: T = (0..len).map(|j| gd[idx(j)] * y[idx(j)]).sum::<T>() / n;
                        let r = inv_std[o * inner + ii];
                        for j in 0..len {
                            gx[idx(j)] = r * (gd[idx(j)] - mg - y[idx(j)] * mgy);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), gx)?)?;
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), data)?)?;
            }
            Op::MeanPool { x, axis } => {
                let xs = self.shape(*x).to_vec();
                let (outer, len, inner) = axis_split(&xs, *axis);
                let n = T::of(len as f64);
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for ii in 0..inner {
                            gx[(o * len + j) * inner + ii] = g.data()[o * inner + ii] / n;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, gx)?)?;
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv))?;
            }
            Op::Embedding { table, ids } => {
                let ts = self.shape(*table).to_vec();
                let d = ts[1];
                let mut gt = Tensor::zeros(&ts);
                let gtd = gt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for (a, &b) in gtd[id * d..(id + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *table, gt)?;
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let xs_shape = self.shape(x).to_vec();
                    let ext = xs_shape[*axis];
                    if self.needs(x) {
                        let mut data = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + ext * inner]);
                        }
                        self.accumulate(grads, x, Tensor::new(xs_shape, data)?)?;
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, ext, inner) = axis_split(&xs, *axis);
                let len = out.shape()[*axis];
                let mut gx = Tensor::zeros(&xs);
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    gx.data_mut()[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_vjp(g, *q, *k, *v, *heads, probs, grads)?;
            }
            Op::CrossEntropy { logits, label, probs } => {
                let gv = g.data()[0];
                let data = probs
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| gv * (p - if j == *label { T::one() } else { T::zero() }))
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), data)?)?;
            }
        }
        Ok(())
    }

    fn reduce_broadcast(&self, g: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
        if g.shape() == target.shape() {
            return g.clone();
        }
        let c = target.len();
        let mut data = vec![T::zero(); c];
        for (j, &x) in g.data().iter().enumerate() {
            data[j % c] += x;
        }
        Tensor::new(target.shape().to_vec(), data).expect("broadcast target shape")
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_vjp(
        &self,
        g: &Tensor<T>,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, dm) = (qv.shape()[0], qv.shape()[1]);
        let tk = kv.shape()[0];
        let dh = dm / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut gq = vec![T::zero(); tq * dm];
        let mut gk = vec![T::zero(); tk * dm];
        let mut gv = vec![T::zero(); tk * dm];
        let mut dp = vec![T::zero(); tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let gi = &g.data()[i * dm + off..i * dm + off + dh];
                // dP = dO · Vᵀ ; dV += Pᵀ · dO
                for j in 0..tk {
                    let vj = &vv.data()[j * dm + off..j * dm + off + dh];
                    dp[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    let gvj = &mut gv[j * dm + off..j * dm + off + dh];
                    for (a, &b) in gvj.iter_mut().zip(gi) {
                        *a += p[j] * b;
                    }
                }
                let dot: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                let qi = &qv.data()[i * dm + off..i * dm + off + dh];
                for j in 0..tk {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let kj = &kv.data()[j * dm + off..j * dm + off + dh];
                    let gqi = &mut gq[i * dm + off..i * dm + off + dh];
                    for (a, &b) in gqi.iter_mut().zip(kj) {
                        *a += ds * b;
                    }
                    let gkj = &mut gk[j * dm + off..j * dm + off + dh];
                    for (a, &b) in gkj.iter_mut().zip(qi) {
                        *a += ds * b;
                    }
                }
            }
        }
        if self.needs(q) {
            self.accumulate(grads, q, Tensor::new(vec![tq, dm], gq)?)?;
        }
        if self.needs(k) {
            self.accumulate(grads, k, Tensor::new(vec![tk, dm], gk)?)?;
        }
        if self.needs(v) {
            self.accumulate(grads, v, Tensor::new(vec![tk, dm], gv)?)?;
        }
        Ok(())
    }
}

/// Gradients produced by a backward pass.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, NodeId)>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any node, `None` if it received none.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a node, zeros of `shape` when unreachable.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    /// Gradient for every bound parameter; unreachable parameters get zeros.
    pub fn into_params(mut self) -> BTreeMap<String, Tensor<T>> {
        let params = std::mem::take(&mut self.params);
        let shapes = std::mem::take(&mut self.shapes);
        params
            .into_iter()
            .zip(shapes)
            .map(|((name, id), shape)| {
                let g = self.take(id).unwrap_or_else(|| Tensor::zeros(&shape));
                (name, g)
            })
            .collect()
    }
}
