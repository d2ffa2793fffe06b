//! Reverse-mode differentiation over a per-frame computation record.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ops::{self, Activation};
use crate::tensor::Tensor;

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Named parameter arrays in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(tensor);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for (name, t) in self.iter() {
            out.insert(name, Tensor::zeros(t.shape()));
        }
        out
    }

    /// Drops every parameter whose name starts with `prefix`.
    pub fn without_prefix(&self, prefix: &str) -> Self {
        let mut out = Self::new();
        for (name, t) in self.iter().filter(|(n, _)| !n.starts_with(prefix)) {
            out.insert(name, t.clone());
        }
        out
    }

    /// SHA-256 over names and shapes plus the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub type NodeId = usize;

enum Op {
    Input,
    Param(usize),
    Conv { x: NodeId, w: NodeId, b: NodeId, cols: Vec<f64> },
    Act { x: NodeId, act: Activation },
    AvgPool { x: NodeId },
    MaxPool { x: NodeId, arg: Vec<usize> },
    Upsample { x: NodeId },
    Concat { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    MulSpatial { x: NodeId, weight: Tensor },
    Gap { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Softmax { x: NodeId },
    Sigmoid { x: NodeId },
    CrossEntropy { p: NodeId, class: usize },
    BceMean { p: NodeId, target: Tensor },
    WeightedSum { terms: Vec<(NodeId, f64)> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records one forward pass so it can be differentiated afterwards.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {name}")))?;
        Ok(self.push(self.params.tensor(id).clone(), Op::Param(id)))
    }

    pub fn conv(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let (y, cols) = ops::conv2d(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Conv { x, w, b, cols }))
    }

    pub fn act(&mut self, x: NodeId, act: Activation) -> NodeId {
        let y = ops::activate(self.value(x), act);
        self.push(y, Op::Act { x, act })
    }

    pub fn avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::avg_pool2(self.value(x))?;
        Ok(self.push(y, Op::AvgPool { x }))
    }

    pub fn max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (y, arg) = ops::max_pool2(self.value(x))?;
        Ok(self.push(y, Op::MaxPool { x, arg }))
    }

    pub fn upsample(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::upsample2(self.value(x))?;
        Ok(self.push(y, Op::Upsample { x }))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape("add of mismatched shapes".into()));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, Op::Add { a, b }))
    }

    /// Multiplies a `[C, h, w]` node by a constant `[h, w]` weight.
    pub fn mul_spatial(&mut self, x: NodeId, weight: Tensor) -> Result<NodeId> {
        let y = ops::mul_spatial(self.value(x), &weight)?;
        Ok(self.push(y, Op::MulSpatial { x, weight }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::Gap { x }))
    }

    pub fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let y = Tensor::from_vec(v.shape(), ops::softmax(v.data())).expect("softmax shape");
        self.push(y, Op::Softmax { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(ops::sigmoid);
        self.push(y, Op::Sigmoid { x })
    }

    /// `-ln(clamp(p[class]))`.
    pub fn cross_entropy(&mut self, p: NodeId, class: usize) -> NodeId {
        let y = Tensor::scalar(cross_entropy(self.value(p).data(), class));
        self.push(y, Op::CrossEntropy { p, class })
    }

    /// Mean per-element binary cross-entropy against a constant target.
    pub fn bce_mean(&mut self, p: NodeId, target: Tensor) -> Result<NodeId> {
        if self.value(p).len() != target.len() {
            return Err(Error::Shape("bce target size mismatch".into()));
        }
        let y = Tensor::scalar(bce_mean(self.value(p).data(), target.data()));
        Ok(self.push(y, Op::BceMean { p, target }))
    }

    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let v = terms.iter().map(|&(id, k)| k * self.value(id).data()[0]).sum();
        self.push(Tensor::scalar(v), Op::WeightedSum { terms })
    }

    /// Gradients of the scalar node `root` with respect to every parameter,
    /// aligned with the store's ordering.
    pub fn backward(&self, root: NodeId) -> ParamStore {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.value(root).shape(), 1.0));
        let mut out = self.params.zeros_like();

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => out.tensor_mut(*pid).add_assign(&g),
                Op::Conv { x, w, b, cols } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x).shape(), self.value(*w), cols, &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Act { x, act } => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d *= act.derivative(*v);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::AvgPool { x } => {
                    acc(&mut grads, *x, ops::avg_pool2_backward(self.value(*x).shape(), &g))
                }
                Op::MaxPool { x, arg } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (o, &src) in arg.iter().enumerate() {
                        dx.data_mut()[src] += g.data()[o];
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Upsample { x } => {
                    acc(&mut grads, *x, ops::upsample2_backward(self.value(*x).shape(), &g))
                }
                Op::Concat { a, b } => {
                    let na = self.value(*a).len();
                    let da = Tensor::from_vec(self.value(*a).shape(), g.data()[..na].to_vec());
                    let db = Tensor::from_vec(self.value(*b).shape(), g.data()[na..].to_vec());
                    acc(&mut grads, *a, da.expect("concat grad"));
                    acc(&mut grads, *b, db.expect("concat grad"));
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::MulSpatial { x, weight } => {
                    let dx = ops::mul_spatial(&g, weight).expect("mul grad");
                    acc(&mut grads, *x, dx);
                }
                Op::Gap { x } => {
                    let shape = self.value(*x).shape();
                    let hw = shape[1] * shape[2];
                    let mut dx = Tensor::zeros(shape);
                    for (c, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                        chunk.fill(g.data()[c] / hw as f64);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    let (o, i) = (wv.shape()[0], wv.shape()[1]);
                    let mut dw = Tensor::zeros(wv.shape());
                    let mut dx = Tensor::zeros(xv.shape());
                    for r in 0..o {
                        let gr = g.data()[r];
                        for c in 0..i {
                            dw.data_mut()[r * i + c] = gr * xv.data()[c];
                            dx.data_mut()[c] += gr * wv.data()[r * i + c];
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, g);
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let dot: f64 = y.iter().zip(g.data()).map(|(a, b)| a * b).sum();
                    let dx: Vec<f64> = y.iter().zip(g.data()).map(|(yi, gi)| yi * (gi - dot)).collect();
                    acc(&mut grads, *x, Tensor::from_vec(node.value.shape(), dx).expect("softmax grad"));
                }
                Op::Sigmoid { x } => {
                    let mut dx = g;
                    for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::CrossEntropy { p, class } => {
                    let pv = self.value(*p);
                    let mut dp = Tensor::zeros(pv.shape());
                    let q = pv.data()[*class];
                    if q > PROB_EPS && q < 1.0 - PROB_EPS {
                        dp.data_mut()[*class] = -g.data()[0] / q;
                    }
                    acc(&mut grads, *p, dp);
                }
                Op::BceMean { p, target } => {
                    let pv = self.value(*p);
                    let n = pv.len() as f64;
                    let scale = g.data()[0] / n;
                    let mut dp = Tensor::zeros(pv.shape());
                    for ((d, &q), &t) in dp.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                        if q > PROB_EPS && q < 1.0 - PROB_EPS {
                            *d = scale * ((1.0 - t) / (1.0 - q) - t / q);
                        }
                    }
                    acc(&mut grads, *p, dp);
                }
                Op::WeightedSum { terms } => {
                    for &(t, k) in terms {
                        acc(&mut grads, t, Tensor::scalar(k * g.data()[0]));
                    }
                }
            }
        }
        out
    }
}

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Negative log of the clamped probability of `class`.
pub fn cross_entropy(probs: &[f64], class: usize) -> f64 {
    -clamp_prob(probs[class]).ln()
}

/// Per-element binary cross-entropy of clamped predictions, averaged.
pub fn bce_mean(pred: &[f64], target: &[f64]) -> f64 {
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let q = clamp_prob(p);
            -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
        })
        .sum();
    total / pred.len() as f64
}
