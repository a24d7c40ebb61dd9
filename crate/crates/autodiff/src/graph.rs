//! Define-by-run computation graph.
//!
//! Every operation evaluates eagerly and appends a node; node indices are a
//! topological order, so `backward` is a single reverse sweep. A graph is
//! built per example and dropped afterwards. Parameters are borrowed from a
//! [`ParamStore`] and each parameter appears at most once per graph, so all
//! of its uses accumulate into one gradient.
//!
//! `backward` may run once per graph; a second call returns
//! [`AutodiffError::BackwardAlreadyRun`].

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{AutodiffError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Tensor),
    Scale(NodeId, f64),
    OneMinus(NodeId),
    ScalarMul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Concat(Vec<NodeId>, usize),
    Stack(Vec<NodeId>),
    Row(NodeId, usize),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax(NodeId, usize),
    Embedding(NodeId, Vec<usize>),
    EmbeddingBagMean(NodeId, Vec<Vec<usize>>),
    ScatterAdd(NodeId, Vec<usize>),
    Sum(NodeId),
    CrossEntropy(NodeId, usize, Vec<f64>),
    NegLog(NodeId, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "elementwise_mul",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::OneMinus(_) => "one_minus",
            Op::ScalarMul(..) => "scalar_mul",
            Op::MatMul(..) => "matmul",
            Op::Concat(..) => "concat",
            Op::Stack(_) => "stack",
            Op::Row(..) => "row",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::Embedding(..) => "embedding_lookup",
            Op::EmbeddingBagMean(..) => "embedding_bag_mean",
            Op::ScatterAdd(..) => "scatter_add",
            Op::Sum(_) => "sum",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::NegLog(..) => "neg_log",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node<'a>>,
    param_nodes: HashMap<ParamId, NodeId>,
    grads: Option<Vec<Option<Tensor>>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) strides.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'a> Graph<'a> {
    /// A graph with no parameter store; only leaves can be differentiated.
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            grads: None,
        }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Graph {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the loss with respect to `id`, available after `backward`.
    /// Nodes that do not influence the loss report `None`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.as_ref()?.get(id.0)?.as_ref()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(id)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> Result<NodeId> {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// A differentiable input that is not a parameter.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// A constant; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// The node for a stored parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        if let Some(&node) = self.param_nodes.get(&id) {
            return Ok(node);
        }
        let store = self.store.ok_or(AutodiffError::NoParameterStore)?;
        if id.0 >= store.len() {
            return Err(AutodiffError::UnknownParameter(format!("#{}", id.0)));
        }
        let node = self.push(Cow::Borrowed(store.get(id)), Op::Param(id), true)?;
        self.param_nodes.insert(id, node);
        Ok(node)
    }

    fn zip_same(&self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.val(a), self.val(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(op, va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.val(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect()).expect("map preserves shape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push_owned(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push_owned(v, Op::Sub(a, b), &[a, b])
    }

    pub fn elementwise_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("elementwise_mul", a, b, |x, y| x * y)?;
        self.push_owned(v, Op::Mul(a, b), &[a, b])
    }

    /// Sum of any number of same-shaped nodes.
    pub fn add_all(&mut self, nodes: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = nodes.split_first().ok_or(AutodiffError::EmptyAxis { op: "add" })?;
        rest.iter().try_fold(first, |acc, &n| self.add(acc, n))
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, a: NodeId, mask: Tensor) -> Result<NodeId> {
        let va = self.val(a);
        if va.shape() != mask.shape() {
            return Err(mismatch("mul_const", va, &mask));
        }
        let data = va.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        self.push_owned(v, Op::MulConst(a, mask), &[a])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.map(a, |x| x * factor);
        self.push_owned(v, Op::Scale(a, factor), &[a])
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.map(a, |x| 1.0 - x);
        self.push_owned(v, Op::OneMinus(a), &[a])
    }

    /// Multiplies every entry of `a` by the one-element node `s`.
    pub fn scalar_mul(&mut self, s: NodeId, a: NodeId) -> Result<NodeId> {
        let vs = self.val(s);
        if vs.len() != 1 {
            return Err(mismatch("scalar_mul", vs, self.val(a)));
        }
        let k = vs.item();
        let v = self.map(a, |x| k * x);
        self.push_owned(v, Op::ScalarMul(s, a), &[s, a])
    }

    /// Dense product for `[m,k]x[k,n]`, `[m,k]x[k]`, `[k]x[k,n]` and `[k]x[k]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.val(a), self.val(b));
        let v = match (va.shape(), vb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let mut out = vec![0.0; m * n];
                let (ad, bd) = (va.data(), vb.data());
                for i in 0..m {
                    let orow = &mut out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let x = ad[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for (o, &y) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                            *o += x * y;
                        }
                    }
                }
                Tensor::new(vec![m, n], out)?
            }
            (&[m, k], &[k2]) if k == k2 => {
                let (ad, bd) = (va.data(), vb.data());
                let out = (0..m).map(|i| dot(&ad[i * k..(i + 1) * k], bd)).collect();
                Tensor::new(vec![m], out)?
            }
            (&[k], &[k2, n]) if k == k2 => {
                let (ad, bd) = (va.data(), vb.data());
                let mut out = vec![0.0; n];
                for p in 0..k {
                    for (o, &y) in out.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                        *o += ad[p] * y;
                    }
                }
                Tensor::new(vec![n], out)?
            }
            (&[k], &[k2]) if k == k2 => Tensor::scalar(dot(va.data(), vb.data())),
            _ => return Err(mismatch("matmul", va, vb)),
        };
        self.push_owned(v, Op::MatMul(a, b), &[a, b])
    }

    /// Concatenation along `axis` (0 for vectors; 0 or 1 for matrices).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *parts.first().ok_or(AutodiffError::EmptyAxis { op: "concat" })?;
        let shape0 = self.val(first).shape().to_vec();
        if axis >= shape0.len() {
            return Err(AutodiffError::InvalidAxis {
                op: "concat",
                axis,
                shape: shape0,
            });
        }
        for &p in &parts[1..] {
            let s = self.val(p).shape();
            let compatible =
                s.len() == shape0.len() && s.iter().zip(&shape0).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", self.val(first), self.val(p)));
            }
        }
        let mut shape = shape0.clone();
        shape[axis] = parts.iter().map(|&p| self.val(p).shape()[axis]).sum();
        let (outer, _, inner) = lanes(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.val(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let v = Tensor::new(shape, data)?;
        self.push_owned(v, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let first = *rows.first().ok_or(AutodiffError::EmptyAxis { op: "stack" })?;
        let d = self.val(first).shape().to_vec();
        if d.len() != 1 {
            return Err(AutodiffError::InvalidAxis {
                op: "stack",
                axis: 0,
                shape: d,
            });
        }
        let mut data = Vec::with_capacity(rows.len() * d[0]);
        for &r in rows {
            if self.val(r).shape() != d.as_slice() {
                return Err(mismatch("stack", self.val(first), self.val(r)));
            }
            data.extend_from_slice(self.val(r).data());
        }
        let v = Tensor::new(vec![rows.len(), d[0]], data)?;
        self.push_owned(v, Op::Stack(rows.to_vec()), rows)
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let va = self.val(a);
        if va.rank() != 2 {
            return Err(AutodiffError::InvalidAxis {
                op: "row",
                axis: 0,
                shape: va.shape().to_vec(),
            });
        }
        if i >= va.shape()[0] {
            return Err(AutodiffError::IndexOutOfRange {
                op: "row",
                index: i,
                size: va.shape()[0],
            });
        }
        let v = Tensor::vector(va.row(i).to_vec());
        self.push_owned(v, Op::Row(a, i), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.map(a, sigmoid);
        self.push_owned(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.map(a, f64::tanh);
        self.push_owned(v, Op::Tanh(a), &[a])
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let va = self.val(a);
        if axis >= va.rank() {
            return Err(AutodiffError::InvalidAxis {
                op: "softmax",
                axis,
                shape: va.shape().to_vec(),
            });
        }
        let (outer, n, inner) = lanes(va.shape(), axis);
        if n == 0 {
            return Err(AutodiffError::EmptyAxis { op: "softmax" });
        }
        let x = va.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * n * inner + k * inner + i;
                let max = (0..n).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (x[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[idx(k)] /= total;
                }
            }
        }
        let v = Tensor::new(va.shape().to_vec(), out)?;
        self.push_owned(v, Op::Softmax(a, axis), &[a])
    }

    /// Rows of `table` gathered by `indices`, as an `[n, d]` matrix.
    pub fn embedding_lookup(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vt = self.val(table);
        if vt.rank() != 2 {
            return Err(AutodiffError::InvalidAxis {
                op: "embedding_lookup",
                axis: 0,
                shape: vt.shape().to_vec(),
            });
        }
        let (rows, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: ix,
                    size: rows,
                });
            }
            data.extend_from_slice(vt.row(ix));
        }
        let v = Tensor::new(vec![indices.len(), d], data)?;
        self.push_owned(v, Op::Embedding(table, indices.to_vec()), &[table])
    }

    /// For each bag, the mean of the selected `table` rows; empty bags give zeros.
    pub fn embedding_bag_mean(&mut self, table: NodeId, bags: &[Vec<usize>]) -> Result<NodeId> {
        let vt = self.val(table);
        if vt.rank() != 2 {
            return Err(AutodiffError::InvalidAxis {
                op: "embedding_bag_mean",
                axis: 0,
                shape: vt.shape().to_vec(),
            });
        }
        let (rows, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = vec![0.0; bags.len() * d];
        for (b, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                continue;
            }
            let out = &mut data[b * d..(b + 1) * d];
            for &ix in bag {
                if ix >= rows {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "embedding_bag_mean",
                        index: ix,
                        size: rows,
                    });
                }
                for (o, v) in out.iter_mut().zip(vt.row(ix)) {
                    *o += v;
                }
            }
            let inv = 1.0 / bag.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let v = Tensor::new(vec![bags.len(), d], data)?;
        self.push_owned(v, Op::EmbeddingBagMean(table, bags.to_vec()), &[table])
    }

    /// `out[indices[i]] += src[i]` into a zero vector of length `size`.
    pub fn scatter_add(&mut self, src: NodeId, indices: &[usize], size: usize) -> Result<NodeId> {
        let vs = self.val(src);
        if vs.rank() != 1 || vs.len() != indices.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_add",
                lhs: vs.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let mut out = vec![0.0; size];
        for (&ix, &x) in indices.iter().zip(vs.data()) {
            if ix >= size {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "scatter_add",
                    index: ix,
                    size,
                });
            }
            out[ix] += x;
        }
        let v = Tensor::vector(out);
        self.push_owned(v, Op::ScatterAdd(src, indices.to_vec()), &[src])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.val(a).sum());
        self.push_owned(v, Op::Sum(a), &[a])
    }

    /// `-log softmax(logits)[target]` for a logits vector.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let vl = self.val(logits);
        if vl.rank() != 1 {
            return Err(AutodiffError::InvalidAxis {
                op: "cross_entropy",
                axis: 0,
                shape: vl.shape().to_vec(),
            });
        }
        if vl.is_empty() {
            return Err(AutodiffError::EmptyAxis { op: "cross_entropy" });
        }
        if target >= vl.len() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "cross_entropy",
                index: target,
                size: vl.len(),
            });
        }
        let x = vl.data();
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = total.ln() + max - x[target];
        let probs = exps.into_iter().map(|e| e / total).collect();
        self.push_owned(Tensor::scalar(loss), Op::CrossEntropy(logits, target, probs), &[logits])
    }

    /// `-log p[target]` for a probability vector.
    pub fn neg_log(&mut self, probs: NodeId, target: usize) -> Result<NodeId> {
        let vp = self.val(probs);
        if vp.rank() != 1 || target >= vp.len() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "neg_log",
                index: target,
                size: vp.len(),
            });
        }
        let v = Tensor::scalar(-vp.data()[target].ln());
        self.push_owned(v, Op::NegLog(probs, target), &[probs])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.grads.is_some() {
            return Err(AutodiffError::BackwardAlreadyRun);
        }
        let lv = self.val(loss);
        if !lv.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if !gy.is_finite() {
                return Err(AutodiffError::NonFiniteGradient { op: node.op.name() });
            }
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let g = gy.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d, _| add_into(d, g));
                self.acc(grads, *b, |d, _| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d, _| add_into(d, g));
                self.acc(grads, *b, |d, _| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                self.acc(grads, *a, |d, _| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                self.acc(grads, *b, |d, _| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::MulConst(a, mask) => self.acc(grads, *a, |d, _| {
                for ((d, g), m) in d.iter_mut().zip(g).zip(mask.data()) {
                    *d += g * m;
                }
            }),
            Op::Scale(a, k) => self.acc(grads, *a, |d, _| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += k * g);
            }),
            Op::OneMinus(a) => self.acc(grads, *a, |d, _| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }),
            Op::ScalarMul(s, a) => {
                let k = self.val(*s).item();
                let va = self.val(*a).data();
                let ds: f64 = g.iter().zip(va).map(|(g, x)| g * x).sum();
                self.acc(grads, *s, |d, _| d[0] += ds);
                self.acc(grads, *a, |d, _| d.iter_mut().zip(g).for_each(|(d, g)| *d += k * g));
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, gy, grads),
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = lanes(y.shape(), *axis);
                let total_chunk = y.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.val(p).shape()[*axis] * inner;
                    self.acc(grads, p, |d, _| {
                        for o in 0..outer {
                            let src = &g[o * total_chunk + offset..o * total_chunk + offset + chunk];
                            add_into(&mut d[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Stack(rows) => {
                let d_len = y.shape()[1];
                for (r, &p) in rows.iter().enumerate() {
                    self.acc(grads, p, |d, _| add_into(d, &g[r * d_len..(r + 1) * d_len]));
                }
            }
            Op::Row(a, r) => self.acc(grads, *a, |d, shape| {
                let cols = shape[1];
                add_into(&mut d[r * cols..(r + 1) * cols], g);
            }),
            Op::Sigmoid(a) => self.acc(grads, *a, |d, _| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y.data()) {
                    *d += g * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => self.acc(grads, *a, |d, _| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y.data()) {
                    *d += g * (1.0 - y * y);
                }
            }),
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = lanes(y.shape(), *axis);
                let yd = y.data();
                self.acc(grads, *a, |d, _| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| o * n * inner + k * inner + i;
                            let dot: f64 = (0..n).map(|k| g[idx(k)] * yd[idx(k)]).sum();
                            for k in 0..n {
                                d[idx(k)] += yd[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Embedding(table, indices) => self.acc(grads, *table, |d, shape| {
                let cols = shape[1];
                for (r, &ix) in indices.iter().enumerate() {
                    add_into(&mut d[ix * cols..(ix + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }),
            Op::EmbeddingBagMean(table, bags) => self.acc(grads, *table, |d, shape| {
                let cols = shape[1];
                for (b, bag) in bags.iter().enumerate() {
                    if bag.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / bag.len() as f64;
                    let src = &g[b * cols..(b + 1) * cols];
                    for &ix in bag {
                        for (d, s) in d[ix * cols..(ix + 1) * cols].iter_mut().zip(src) {
                            *d += inv * s;
                        }
                    }
                }
            }),
            Op::ScatterAdd(src, indices) => self.acc(grads, *src, |d, _| {
                for (d, &ix) in d.iter_mut().zip(indices) {
                    *d += g[ix];
                }
            }),
            Op::Sum(a) => self.acc(grads, *a, |d, _| d.iter_mut().for_each(|d| *d += g[0])),
            Op::CrossEntropy(logits, target, probs) => self.acc(grads, *logits, |d, _| {
                for (k, (d, p)) in d.iter_mut().zip(probs).enumerate() {
                    let onehot = if k == *target { 1.0 } else { 0.0 };
                    *d += g[0] * (p - onehot);
                }
            }),
            Op::NegLog(probs, target) => {
                let p = self.val(*probs).data()[*target];
                self.acc(grads, *probs, |d, _| d[*target] -= g[0] / p);
            }
        }
    }

    fn matmul_backward(&self, a: NodeId, b: NodeId, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let (va, vb) = (self.val(a), self.val(b));
        let (ad, bd, g) = (va.data(), vb.data(), gy.data());
        match (va.shape(), vb.shape()) {
            (&[m, k], &[_, n]) => {
                // dA = dC * B^T, dB = A^T * dC
                self.acc(grads, a, |d, _| {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            d[i * k + p] += dot(&g[i * n..(i + 1) * n], brow);
                        }
                    }
                });
                self.acc(grads, b, |d, _| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = ad[i * k + p];
                            for (d, gv) in d[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *d += x * gv;
                            }
                        }
                    }
                });
            }
            (&[m, k], &[_]) => {
                self.acc(grads, a, |d, _| {
                    for i in 0..m {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for (d, x) in d[i * k..(i + 1) * k].iter_mut().zip(bd) {
                            *d += gi * x;
                        }
                    }
                });
                self.acc(grads, b, |d, _| {
                    for i in 0..m {
                        let gi = g[i];
                        for (d, w) in d.iter_mut().zip(&ad[i * k..(i + 1) * k]) {
                            *d += gi * w;
                        }
                    }
                });
            }
            (&[k], &[_, n]) => {
                self.acc(grads, a, |d, _| {
                    for p in 0..k {
                        d[p] += dot(&bd[p * n..(p + 1) * n], g);
                    }
                });
                self.acc(grads, b, |d, _| {
                    for p in 0..k {
                        for (d, gv) in d[p * n..(p + 1) * n].iter_mut().zip(g) {
                            *d += ad[p] * gv;
                        }
                    }
                });
            }
            _ => {
                let gs = g[0];
                self.acc(grads, a, |d, _| d.iter_mut().zip(bd).for_each(|(d, y)| *d += gs * y));
                self.acc(grads, b, |d, _| d.iter_mut().zip(ad).for_each(|(d, x)| *d += gs * x));
            }
        }
    }

    /// Runs `f` on the gradient buffer of `id` (zero-initialised on first touch).
    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, f: impl FnOnce(&mut [f64], &[usize])) {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        f(slot.data_mut(), node.value.shape());
    }

    /// Adds `scale * dLoss/dParam` for every parameter used in this graph.
    pub fn accumulate_param_grads(&self, into: &mut Gradients, scale: f64) -> Result<()> {
        let grads = self.grads.as_ref().ok_or(AutodiffError::BackwardNotRun)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(pid), Some(g)) = (&node.op, g) {
                into.get_mut(*pid).add_scaled(g, scale);
            }
        }
        Ok(())
    }

    /// Gradient of a parameter used in this graph, if it received any.
    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor> {
        let node = *self.param_nodes.get(&id)?;
        self.grad(node)
    }
}

/// Dot product with four independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (d, g) in d.iter_mut().zip(g) {
        *d += g;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0)).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn softmax_over_empty_axis_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![])).unwrap();
        assert!(matches!(
            g.softmax(x, 0),
            Err(AutodiffError::EmptyAxis { op: "softmax" })
        ));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn sum_gives_all_ones_gradient() {
        let mut g = Graph::new();
        let x = g
            .input(Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap())
            .unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let q = store.add("q", Tensor::vector(vec![3.0, 4.0])).unwrap();
        let mut g = Graph::with_params(&store);
        let qn = g.param(q).unwrap();
        let _pn = g.param(p).unwrap();
        let loss = g.sum(qn).unwrap();
        g.backward(loss).unwrap();
        let mut grads = Gradients::zeros_like(&store);
        g.accumulate_param_grads(&mut grads, 1.0).unwrap();
        assert_eq!(grads.get(p).data(), &[0.0, 0.0]);
        assert_eq!(grads.get(q).data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0)).unwrap();
        let y = g.scale(x, 3.0).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(AutodiffError::BackwardAlreadyRun)));
        assert_eq!(g.grad(x).unwrap().item(), 3.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_forward_names_the_op() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![0.0, 1.0])).unwrap();
        let err = g.neg_log(p, 0).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFinite { op: "neg_log" }));
    }

    #[test]
    fn repeated_param_use_shares_one_node() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::with_params(&store);
        let a = g.param(p).unwrap();
        let b = g.param(p).unwrap();
        assert_eq!(a, b);
        let prod = g.elementwise_mul(a, b).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.param_grad(p).unwrap().data(), &[2.0, 4.0]);
    }
}
