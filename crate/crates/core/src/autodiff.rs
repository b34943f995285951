//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes one
//! node holding its output value, so append order is a topological order and
//! [`Graph::backward`] simply walks the list in reverse. Gradients are summed
//! into each input in that fixed order, which keeps results bitwise
//! reproducible.
//!
//! Parameters live outside the graph in a [`ParamStore`]; a fresh graph is
//! built for every forward pass and parameters are bound into it as leaves
//! with [`Graph::param`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::kernels::{self, ConvGeometry, PoolKind};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Vec<Var>),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxLastDim(Var),
    Mean(Var),
    Sum(Var),
    ConcatChannel(Vec<Var>),
    SliceChannel { x: Var, channels: Vec<usize> },
    MergeChannels { a: Var, a_channels: Vec<usize>, b: Var, b_channels: Vec<usize> },
    ScalePerChannel { x: Var, s: Var },
    WeightedSum { inputs: Vec<Var>, w: Var, offset: usize },
    Crop(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    Pool { x: Var, kind: PoolKind, stride: usize, argmax: Vec<usize> },
    GlobalPool { x: Var, kind: PoolKind, argmax: Vec<usize> },
    BatchNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    pub(crate) fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(_) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::SoftmaxLastDim(_) => "softmax-lastdim",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::ConcatChannel(_) => "concat-channel",
            Op::SliceChannel { .. } => "slice-channel",
            Op::MergeChannels { .. } => "merge-channels",
            Op::ScalePerChannel { .. } => "scale-per-channel",
            Op::WeightedSum { .. } => "weighted-sum",
            Op::Crop(_) => "crop",
            Op::Reshape(_) => "reshape",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Pool { .. } => "pool2d",
            Op::GlobalPool { .. } => "global-pool",
            Op::BatchNorm { .. } => "batch-norm",
            Op::CrossEntropy { .. } => "cross-entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(xs) | Op::ConcatChannel(xs) => xs.clone(),
            Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::SoftmaxLastDim(x)
            | Op::Mean(x)
            | Op::Sum(x)
            | Op::Crop(x)
            | Op::Reshape(x) => vec![*x],
            Op::SliceChannel { x, .. } => vec![*x],
            Op::MergeChannels { a, b, .. } => vec![*a, *b],
            Op::ScalePerChannel { x, s } => vec![*x, *s],
            Op::WeightedSum { inputs, w, .. } => {
                let mut v = inputs.clone();
                v.push(*w);
                v
            }
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Pool { x, .. } | Op::GlobalPool { x, .. } | Op::BatchNorm { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
}

/// Recorded computation. See the module docs.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    params: Vec<Option<Var>>,
    trainable: [bool; 2],
    counting: bool,
    counted: u64,
    backward_done: bool,
    /// `relu(x)` node per input, so branches sharing an input share one node.
    relu_of: HashMap<usize, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph in which every parameter group is trainable.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            trainable: [true, true],
            counting: false,
            counted: 0,
            backward_done: false,
            relu_of: HashMap::new(),
        }
    }

    /// A graph in which only parameters of `group` receive gradients.
    pub fn training(group: Group) -> Self {
        let mut g = Self::new();
        g.trainable = [false, false];
        g.trainable[group.index()] = true;
        g
    }

    /// A graph in which no parameter receives gradients.
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.trainable = [false, false];
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Gradient of the last `backward` call w.r.t. `v`, if `v` took part.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Kind names of all recorded nodes, in append order.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    /// Input ids of a node, for graph inspection.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        if self.counting {
            self.counted += t.numel() as u64;
        }
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let p = store.get(id);
        let mut t = Tensor::new(p.value.shape(), p.value.values().to_vec())
            .expect("stored parameter has a valid shape");
        t.requires_grad = self.trainable[p.group.index()];
        let v = self.leaf(t);
        self.params[id.0] = Some(v);
        v
    }

    /// Node bound to `id`, if the forward pass used it.
    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.params.get(id.0).copied().flatten()
    }

    /// Starts or stops counting the floats of every node created.
    pub fn set_counting(&mut self, on: bool) {
        self.counting = on;
    }

    /// Floats allocated while counting was on.
    pub fn counted_floats(&self) -> u64 {
        self.counted
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let kind = op.kind();
        if !value.is_finite() {
            return Err(Error::NonFinite(kind));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].value.requires_grad);
        if self.counting {
            self.counted += value.numel() as u64;
        }
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, kind: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(kind, sa, sb));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let values = t.values().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape(), values)?;
        self.push(out, op)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    /// Elementwise sum of any number of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::EmptyInput("add"))?;
        for &x in &xs[1..] {
            self.same_shape("add", first, x)?;
        }
        let mut acc = self.value(first).values().to_vec();
        for &x in &xs[1..] {
            for (o, v) in acc.iter_mut().zip(self.value(x).values()) {
                *o += v;
            }
        }
        let out = Tensor::new(self.shape(first), acc)?;
        self.push(out, Op::Add(xs.to_vec()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.shape(a), values)?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a), values)?;
        self.push(out, Op::Mul(a, b))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, factor), |v| v * factor)
    }

    /// Repeated calls on the same input return the same node.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        if let Some(&y) = self.relu_of.get(&x.0) {
            return Ok(y);
        }
        let y = self.map(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })?;
        self.relu_of.insert(x.0, y);
        Ok(y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    // ---- contractions and reductions ----

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (&sa[..], &sb[..]) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let out = kernels::matmul(self.value(a).values(), self.value(b).values(), m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        self.push(out, Op::MatMul { a, b, m, k, n })
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().expect("tensor has at least one axis");
        let mut values = t.values().to_vec();
        for row in values.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape(), values)?;
        self.push(out, Op::SoftmaxLastDim(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.values().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    // ---- channel plumbing on (B, C, H, W) ----

    /// Concatenates along the channel axis.
    pub fn concat_channel(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::EmptyInput("concat-channel"))?;
        let [b, _, h, w] = self.value(first).dims4("concat-channel")?;
        let mut total = 0;
        for &x in xs {
            let [bx, cx, hx, wx] = self.value(x).dims4("concat-channel")?;
            if (bx, hx, wx) != (b, h, w) {
                return Err(Error::shape("concat-channel", self.shape(first), self.shape(x)));
            }
            total += cx;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for &x in xs {
                let t = self.value(x);
                let c = t.shape()[1];
                out.extend_from_slice(&t.values()[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let out = Tensor::new(&[b, total, h, w], out)?;
        self.push(out, Op::ConcatChannel(xs.to_vec()))
    }

    /// Gathers the listed channels, in the listed order.
    pub fn slice_channel(&mut self, x: Var, channels: &[usize]) -> Result<Var> {
        if channels.is_empty() {
            return Err(Error::EmptyInput("slice-channel"));
        }
        let [b, c, h, w] = self.value(x).dims4("slice-channel")?;
        if let Some(&bad) = channels.iter().find(|&&ch| ch >= c) {
            return Err(Error::invalid("slice-channel", format!("channel {bad} out of range for {c}")));
        }
        let plane = h * w;
        let src = self.value(x).values();
        let mut out = Vec::with_capacity(b * channels.len() * plane);
        for bi in 0..b {
            for &ch in channels {
                let base = (bi * c + ch) * plane;
                out.extend_from_slice(&src[base..base + plane]);
            }
        }
        let out = Tensor::new(&[b, channels.len(), h, w], out)?;
        self.push(out, Op::SliceChannel { x, channels: channels.to_vec() })
    }

    /// Inverse of two complementary [`Graph::slice_channel`] gathers: channel
    /// `a_channels[i]` of the output is channel `i` of `a`, likewise for `b`.
    pub fn merge_channels(
        &mut self,
        a: Var,
        a_channels: &[usize],
        b: Var,
        b_channels: &[usize],
    ) -> Result<Var> {
        let [ba, ca, ha, wa] = self.value(a).dims4("merge-channels")?;
        let [bb, cb, hb, wb] = self.value(b).dims4("merge-channels")?;
        if (ba, ha, wa) != (bb, hb, wb) || ca != a_channels.len() || cb != b_channels.len() {
            return Err(Error::shape("merge-channels", self.shape(a), self.shape(b)));
        }
        let c = ca + cb;
        let mut seen = vec![false; c];
        for &ch in a_channels.iter().chain(b_channels) {
            if ch >= c || seen[ch] {
                return Err(Error::invalid(
                    "merge-channels",
                    "channel index sets must partition the output channels",
                ));
            }
            seen[ch] = true;
        }
        let plane = ha * wa;
        let mut out = vec![0.0; ba * c * plane];
        for (src, idx, cs) in [(a, a_channels, ca), (b, b_channels, cb)] {
            let v = self.value(src).values();
            for bi in 0..ba {
                for (i, &ch) in idx.iter().enumerate() {
                    let from = (bi * cs + i) * plane;
                    let to = (bi * c + ch) * plane;
                    out[to..to + plane].copy_from_slice(&v[from..from + plane]);
                }
            }
        }
        let out = Tensor::new(&[ba, c, ha, wa], out)?;
        self.push(
            out,
            Op::MergeChannels {
                a,
                a_channels: a_channels.to_vec(),
                b,
                b_channels: b_channels.to_vec(),
            },
        )
    }

    /// `x[b,c,h,w] * s[c]` or `x[b,c,h,w] * s[b,c]`.
    pub fn scale_per_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("scale-per-channel")?;
        let ss = self.shape(s);
        let per_sample = match ss {
            [n] if *n == c => false,
            [bs, n] if *bs == b && *n == c => true,
            _ => return Err(Error::shape("scale-per-channel", self.shape(x), ss)),
        };
        let plane = h * w;
        let sv = self.value(s).values();
        let mut out = self.value(x).values().to_vec();
        for bi in 0..b {
            for ch in 0..c {
                let f = if per_sample { sv[bi * c + ch] } else { sv[ch] };
                let base = (bi * c + ch) * plane;
                out[base..base + plane].iter_mut().for_each(|v| *v *= f);
            }
        }
        let out = Tensor::new(&[b, c, h, w], out)?;
        self.push(out, Op::ScalePerChannel { x, s })
    }

    /// `sum_k w[offset + k] * inputs[k]`; `w` is typically a row of a
    /// softmaxed weight matrix.
    pub fn weighted_sum(&mut self, inputs: &[Var], w: Var, offset: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::EmptyInput("weighted-sum"))?;
        for &x in &inputs[1..] {
            self.same_shape("weighted-sum", first, x)?;
        }
        let wv = self.value(w).values();
        if offset + inputs.len() > wv.len() {
            return Err(Error::invalid(
                "weighted-sum",
                format!("weights of length {} cannot cover {} inputs at offset {offset}", wv.len(), inputs.len()),
            ));
        }
        let coeffs = wv[offset..offset + inputs.len()].to_vec();
        let mut acc = vec![0.0; self.value(first).numel()];
        for (&x, &a) in inputs.iter().zip(&coeffs) {
            for (o, v) in acc.iter_mut().zip(self.value(x).values()) {
                *o += a * v;
            }
        }
        let out = Tensor::new(self.shape(first), acc)?;
        self.push(out, Op::WeightedSum { inputs: inputs.to_vec(), w, offset })
    }

    /// Drops the first row and first column of every plane.
    pub fn crop(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("crop")?;
        if h < 2 || w < 2 {
            return Err(Error::invalid("crop", format!("plane {h}x{w} too small")));
        }
        let src = self.value(x).values();
        let mut out = Vec::with_capacity(b * c * (h - 1) * (w - 1));
        for p in 0..b * c {
            for y in 1..h {
                let row = p * h * w + y * w;
                out.extend_from_slice(&src[row + 1..row + w]);
            }
        }
        let out = Tensor::new(&[b, c, h - 1, w - 1], out)?;
        self.push(out, Op::Crop(x))
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().with_requires_grad(false);
        let out = t.reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    // ---- backward ----

    /// Reverse pass from a scalar `loss`. Afterwards [`Graph::grad`] returns
    /// the gradient for every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("empty graph".into()));
        }
        if self.backward_done {
            return Err(Error::Backward("graph already differentiated".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Backward("loss does not depend on any trainable tensor".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
            self.nodes[i].value.grad = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].value.requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !needs(v) {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.values();
        match &node.op {
            Op::Leaf => {}
            Op::Add(xs) => {
                for &x in xs {
                    acc(x, &mut |d| add_into(d, g));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(o, gi)| *o -= gi));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((o, gi), y) in d.iter_mut().zip(g).zip(vb) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((o, gi), x) in d.iter_mut().zip(g).zip(va) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * f)),
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| kernels::matmul_grad_lhs(g, vb, d, *m, *k, *n));
                acc(*b, &mut |d| kernels::matmul_grad_rhs(va, g, d, *m, *k, *n));
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for ((o, gi), xi) in d.iter_mut().zip(g).zip(vx) {
                        *o += if *xi > 0.0 { *gi } else { 0.0 };
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.values();
                acc(*x, &mut |d| {
                    for ((o, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::SoftmaxLastDim(x) => {
                let y = node.value.values();
                let n = *node.value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::ConcatChannel(xs) => {
                let [b, total, h, w] = node.value.dims4("concat-channel").unwrap();
                let plane = h * w;
                let mut offset = 0;
                for &x in xs {
                    let c = self.nodes[x.0].value.shape()[1];
                    acc(x, &mut |d| {
                        for bi in 0..b {
                            let src = (bi * total + offset) * plane;
                            add_into(&mut d[bi * c * plane..(bi + 1) * c * plane], &g[src..src + c * plane]);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceChannel { x, channels } => {
                let [b, c, h, w] = self.nodes[x.0].value.dims4("slice-channel").unwrap();
                let plane = h * w;
                let k = channels.len();
                acc(*x, &mut |d| {
                    for bi in 0..b {
                        for (i, &ch) in channels.iter().enumerate() {
                            let to = (bi * c + ch) * plane;
                            let from = (bi * k + i) * plane;
                            add_into(&mut d[to..to + plane], &g[from..from + plane]);
                        }
                    }
                });
            }
            Op::MergeChannels { a, a_channels, b, b_channels } => {
                let [bsz, c, h, w] = node.value.dims4("merge-channels").unwrap();
                let plane = h * w;
                for (src, idx) in [(*a, a_channels), (*b, b_channels)] {
                    let cs = idx.len();
                    acc(src, &mut |d| {
                        for bi in 0..bsz {
                            for (i, &ch) in idx.iter().enumerate() {
                                let from = (bi * c + ch) * plane;
                                let to = (bi * cs + i) * plane;
                                add_into(&mut d[to..to + plane], &g[from..from + plane]);
                            }
                        }
                    });
                }
            }
            Op::ScalePerChannel { x, s } => {
                let [b, c, h, w] = self.nodes[x.0].value.dims4("scale-per-channel").unwrap();
                let plane = h * w;
                let per_sample = self.nodes[s.0].value.shape().len() == 2;
                let (vx, vs) = (val(*x), val(*s));
                acc(*x, &mut |d| {
                    for bi in 0..b {
                        for ch in 0..c {
                            let f = if per_sample { vs[bi * c + ch] } else { vs[ch] };
                            let base = (bi * c + ch) * plane;
                            for p in base..base + plane {
                                d[p] += g[p] * f;
                            }
                        }
                    }
                });
                acc(*s, &mut |d| {
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * plane;
                            let dot: f64 = (base..base + plane).map(|p| g[p] * vx[p]).sum();
                            d[if per_sample { bi * c + ch } else { ch }] += dot;
                        }
                    }
                });
            }
            Op::WeightedSum { inputs, w, offset } => {
                let vw = val(*w);
                for (k, &x) in inputs.iter().enumerate() {
                    let a = vw[offset + k];
                    acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(o, gi)| *o += a * gi));
                }
                acc(*w, &mut |d| {
                    for (k, &x) in inputs.iter().enumerate() {
                        d[offset + k] += val(x).iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Crop(x) => {
                let [b, c, h, w] = self.nodes[x.0].value.dims4("crop").unwrap();
                acc(*x, &mut |d| {
                    let mut src = 0;
                    for p in 0..b * c {
                        for y in 1..h {
                            let row = p * h * w + y * w;
                            add_into(&mut d[row + 1..row + w], &g[src..src + w - 1]);
                            src += w - 1;
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = {
                    let s = self.nodes[x.0].value.shape();
                    (s[0], s[1])
                };
                let fout = self.nodes[w.0].value.shape()[0];
                let (vx, vw) = (val(*x), val(*w));
                // y = x W^T: dx = g W, dW = g^T x
                acc(*x, &mut |d| kernels::matmul_acc(g, vw, d, n, fout, fin));
                acc(*w, &mut |d| kernels::matmul_grad_rhs(g, vx, d, n, fout, fin));
                if let Some(bv) = b {
                    acc(*bv, &mut |d| {
                        for row in g.chunks(fout) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, geom } => {
                let xs = self.nodes[x.0].value.dims4("conv2d").unwrap();
                let ws = self.nodes[w.0].value.shape().to_vec();
                let os = node.value.dims4("conv2d").unwrap();
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |d| kernels::conv2d_grad_input(g, vw, d, xs, &ws, os, geom));
                acc(*w, &mut |d| kernels::conv2d_grad_weight(g, vx, d, xs, &ws, os, geom));
            }
            Op::Pool { x, kind, stride, argmax } => {
                let xs = self.nodes[x.0].value.dims4("pool2d").unwrap();
                let os = node.value.dims4("pool2d").unwrap();
                acc(*x, &mut |d| kernels::pool2d_backward(g, d, *kind, argmax, xs, os, *stride));
            }
            Op::GlobalPool { x, kind, argmax } => {
                let [_, _, h, w] = self.nodes[x.0].value.dims4("global-pool").unwrap();
                let plane = h * w;
                acc(*x, &mut |d| match kind {
                    PoolKind::Max => {
                        for (gi, &a) in g.iter().zip(argmax) {
                            d[a] += gi;
                        }
                    }
                    PoolKind::Avg => {
                        for (p, gi) in g.iter().enumerate() {
                            let share = gi / plane as f64;
                            d[p * plane..(p + 1) * plane].iter_mut().for_each(|o| *o += share);
                        }
                    }
                });
            }
            Op::BatchNorm { x, xhat, inv_std } => {
                let dims = self.nodes[x.0].value.dims4("batch-norm").unwrap();
                acc(*x, &mut |d| kernels::batch_norm_backward(g, xhat, inv_std, d, dims));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = self.nodes[logits.0].value.shape()[1];
                let b = labels.len() as f64;
                acc(*logits, &mut |d| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..n {
                            let t = if j == label { 1.0 } else { 0.0 };
                            d[r * n + j] += g[0] * (probs[r * n + j] - t) / b;
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, s)| *o += s);
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}
