//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows the model parameters immutably, records every op as it
//! runs forward, and replays the tape backwards in [`Graph::backward`].
//! Batch-norm running-statistic updates are collected rather than applied,
//! so a forward pass never mutates parameters.

use std::hash::Hasher;

use crate::network::params::ModelParameters;
use crate::ops;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Sigmoid inputs are clamped to this magnitude; `sigmoid(15)` is still
/// below 1 in `f32`.
pub const SIGMOID_LIMIT: f64 = 15.0;

/// Forward-pass behavior switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Batch norm uses batch statistics (and records running-stat updates).
    pub training: bool,
    /// Hash every piecewise-linear branch decision (ReLU signs, pooling
    /// argmaxes) so callers can detect when a perturbation crosses a kink.
    pub track_kinks: bool,
}

impl Mode {
    pub const INFERENCE: Mode = Mode { training: false, track_kinks: false };
    pub const TRAINING: Mode = Mode { training: true, track_kinks: false };
}

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub running_mean: usize,
    pub running_var: usize,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

enum Op<T> {
    Input,
    Param(usize),
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    MulChannel { x: NodeId, gate: NodeId },
    MulSpatial { x: NodeId, gate: NodeId },
    MaxPool { x: NodeId, arg: Vec<u32> },
    GlobalMax { x: NodeId, arg: Vec<u32> },
    GlobalAvg(NodeId),
    ChannelMax { x: NodeId, arg: Vec<u32> },
    ChannelMean(NodeId),
    Concat(NodeId, NodeId),
    Resize(NodeId),
    Crop(NodeId),
    CrossEntropy { logits: NodeId, labels: Vec<u8>, count: usize },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients for every parameter entry, aligned with
/// [`ModelParameters::entries`]. Entries that received no gradient are `None`.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, idx: usize) -> Option<&Tensor<T>> {
        self.grads.get(idx).and_then(|g| g.as_ref())
    }
}

pub struct Graph<'p, T: Element> {
    params: &'p ModelParameters<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<NodeId>>,
    mode: Mode,
    bn_updates: Vec<BnUpdate<T>>,
    kinks: KinkHasher,
}

#[derive(Default)]
struct KinkHasher(u64);

impl Hasher for KinkHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        // FNV-1a
        let mut h = if self.0 == 0 { 0xcbf29ce484222325 } else { self.0 };
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        self.0 = h;
    }
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn new(params: &'p ModelParameters<T>, mode: Mode) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.entries().len()],
            mode,
            bn_updates: Vec::new(),
            kinks: KinkHasher::default(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        match &self.nodes[id.0].op {
            Op::Param(i) => &self.params.entries()[*i].tensor,
            _ => self.nodes[id.0].value.as_ref().expect("non-param node carries a value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> [usize; 4] {
        self.value(id).shape()
    }

    /// Hash of all branch decisions taken so far (zero unless kinks are tracked).
    pub fn kink_signature(&self) -> u64 {
        self.kinks.finish()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn record_kinks(&mut self, arg: &[u32]) {
        if self.mode.track_kinks {
            for a in arg {
                self.kinks.write(&a.to_le_bytes());
            }
        }
    }

    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.nodes.push(Node { value: Some(t), op: Op::Input, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, idx: usize) -> NodeId {
        if let Some(id) = self.param_nodes[idx] {
            return id;
        }
        self.nodes.push(Node { value: None, op: Op::Param(idx), requires_grad: true });
        let id = NodeId(self.nodes.len() - 1);
        self.param_nodes[idx] = Some(id);
        id
    }

    pub fn conv(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let y = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(y, Op::Conv { x, w, b, stride, pad }, &parents)
    }

    /// Batch norm over `[gamma, beta, running_mean, running_var]` parameter entries.
    pub fn batch_norm(&mut self, x: NodeId, gamma: usize, beta: usize, running_mean: usize, running_var: usize) -> NodeId {
        let eps = T::lit(ops::BN_EPS);
        let gn = self.param(gamma);
        let bn = self.param(beta);
        let (mean, inv_std, batch_stats) = if self.mode.training {
            let xv = self.value(x);
            let (mean, var) = ops::channel_stats(xv);
            let [n, _, h, w] = xv.shape();
            let m = (n * h * w) as f64;
            let unbiased = if m > 1.0 { T::lit(m / (m - 1.0)) } else { T::one() };
            self.bn_updates.push(BnUpdate {
                running_mean,
                running_var,
                batch_mean: mean.clone(),
                batch_var: var.iter().map(|&v| v * unbiased).collect(),
            });
            let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv, true)
        } else {
            let p = self.params.entries();
            let mean = p[running_mean].tensor.data().to_vec();
            let inv: Vec<T> = p[running_var].tensor.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv, false)
        };
        let y = ops::batch_norm_apply(
            self.value(x),
            &mean,
            &inv_std,
            self.value(gn).data(),
            self.value(bn).data(),
        );
        self.push(y, Op::BatchNorm { x, gamma: gn, beta: bn, mean, inv_std, batch_stats }, &[x, gn, bn])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        if self.mode.track_kinks {
            let words: Vec<u64> = self
                .value(x)
                .data()
                .chunks(64)
                .map(|c| c.iter().fold(0u64, |bits, &v| (bits << 1) | (v > T::zero()) as u64))
                .collect();
            for w in words {
                self.kinks.write(&w.to_le_bytes());
            }
        }
        self.push(y, Op::Relu(x), &[x])
    }

    /// Sigmoid of the input clamped to `±SIGMOID_LIMIT`, so outputs stay
    /// strictly inside `(0, 1)` even in single precision.
    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let lim = T::lit(SIGMOID_LIMIT);
        let y = self.value(x).map(|v| ops::sigmoid(v.max(-lim).min(lim)));
        if self.mode.track_kinks {
            let words: Vec<u64> = self
                .value(x)
                .data()
                .chunks(64)
                .map(|c| c.iter().fold(0u64, |bits, &v| (bits << 1) | (v.abs() > lim) as u64))
                .collect();
            for w in words {
                self.kinks.write(&w.to_le_bytes());
            }
        }
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add(a, b), &[a, b])
    }

    /// `x * gate` with `gate` of shape `[n, c, 1, 1]`.
    pub fn mul_channel(&mut self, x: NodeId, gate: NodeId) -> NodeId {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        assert_eq!(self.shape(gate), [n, c, 1, 1], "channel gate shape");
        let g = self.value(gate).data();
        let mut y = xv.clone();
        for (p, plane) in y.data_mut().chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v = *v * g[p]);
        }
        self.push(y, Op::MulChannel { x, gate }, &[x, gate])
    }

    /// `x * gate` with `gate` of shape `[n, 1, h, w]`.
    pub fn mul_spatial(&mut self, x: NodeId, gate: NodeId) -> NodeId {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        assert_eq!(self.shape(gate), [n, 1, h, w], "spatial gate shape");
        let g = self.value(gate).data();
        let hw = h * w;
        let mut y = xv.clone();
        for s in 0..n {
            for ch in 0..c {
                let plane = &mut y.data_mut()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for (v, &gv) in plane.iter_mut().zip(&g[s * hw..(s + 1) * hw]) {
                    *v = *v * gv;
                }
            }
        }
        self.push(y, Op::MulSpatial { x, gate }, &[x, gate])
    }

    pub fn max_pool(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        let (y, arg) = ops::max_pool(self.value(x), k, stride, pad);
        self.record_kinks(&arg);
        self.push(y, Op::MaxPool { x, arg }, &[x])
    }

    pub fn global_max_pool(&mut self, x: NodeId) -> NodeId {
        let (y, arg) = ops::global_max_pool(self.value(x));
        self.record_kinks(&arg);
        self.push(y, Op::GlobalMax { x, arg }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let y = ops::global_avg_pool(self.value(x));
        self.push(y, Op::GlobalAvg(x), &[x])
    }

    pub fn channel_max(&mut self, x: NodeId) -> NodeId {
        let (y, arg) = ops::channel_max(self.value(x));
        self.record_kinks(&arg);
        self.push(y, Op::ChannelMax { x, arg }, &[x])
    }

    pub fn channel_mean(&mut self, x: NodeId) -> NodeId {
        let y = ops::channel_mean(self.value(x));
        self.push(y, Op::ChannelMean(x), &[x])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = Tensor::concat_channels(self.value(a), self.value(b));
        self.push(y, Op::Concat(a, b), &[a, b])
    }

    /// Bilinear resize to `(h, w)`.
    pub fn resize(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let y = ops::bilinear_resize(self.value(x), h, w);
        self.push(y, Op::Resize(x), &[x])
    }

    /// Top-left crop to `(h, w)`.
    pub fn crop(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let y = self.value(x).crop(h, w);
        self.push(y, Op::Crop(x), &[x])
    }

    /// Mean cross-entropy; `labels` holds 0, 1 or [`ops::IGNORE_LABEL`] per pixel.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<u8>) -> NodeId {
        let (loss, count) = ops::softmax_cross_entropy(self.value(logits), &labels);
        self.push(Tensor::full([1, 1, 1, 1], loss), Op::CrossEntropy { logits, labels, count }, &[logits])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(self, root: NodeId) -> Gradients<T> {
        assert_eq!(self.shape(root), [1, 1, 1, 1], "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full([1, 1, 1, 1], T::one()));
        let mut param_grads: Vec<Option<Tensor<T>>> = (0..self.params.entries().len()).map(|_| None).collect();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let need = |id: NodeId| self.nodes[id.0].requires_grad;
            let acc = |id: NodeId, t: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[id.0].requires_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(idx) => match &mut param_grads[*idx] {
                    Some(existing) => existing.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::Conv { x, w, b, stride, pad } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *pad, need(*x));
                    if let Some(dx) = dx {
                        acc(*x, dx, &mut grads);
                    }
                    acc(*w, dw, &mut grads);
                    if let Some(b) = b {
                        acc(*b, db, &mut grads);
                    }
                }
                Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                    let gv = self.value(*gamma).data();
                    let (dx, dg, db) = ops::batch_norm_backward(self.value(*x), mean, inv_std, gv, &g, *batch_stats);
                    let c = dg.len();
                    acc(*x, dx, &mut grads);
                    acc(*gamma, Tensor::from_vec([1, c, 1, 1], dg), &mut grads);
                    acc(*beta, Tensor::from_vec([1, c, 1, 1], db), &mut grads);
                }
                Op::Relu(x) => {
                    let y = self.value(NodeId(i));
                    let mut d = g;
                    for (dv, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                        if yv <= T::zero() {
                            *dv = T::zero();
                        }
                    }
                    acc(*x, d, &mut grads);
                }
                Op::Sigmoid(x) => {
                    let y = self.value(NodeId(i));
                    let lim = T::lit(SIGMOID_LIMIT);
                    let mut d = g;
                    for ((dv, &yv), &xv) in d.data_mut().iter_mut().zip(y.data()).zip(self.value(*x).data()) {
                        *dv = if xv.abs() > lim { T::zero() } else { *dv * yv * (T::one() - yv) };
                    }
                    acc(*x, d, &mut grads);
                }
                Op::Add(a, b) => {
                    if need(*b) {
                        acc(*b, g.clone(), &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::MulChannel { x, gate } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gate);
                    let [n, c, h, w] = xv.shape();
                    let hw = h * w;
                    if need(*gate) {
                        let mut dg = Tensor::zeros([n, c, 1, 1]);
                        for p in 0..n * c {
                            let s = g.data()[p * hw..(p + 1) * hw]
                                .iter()
                                .zip(&xv.data()[p * hw..(p + 1) * hw])
                                .fold(T::zero(), |a, (&d, &v)| a + d * v);
                            dg.data_mut()[p] = s;
                        }
                        acc(*gate, dg, &mut grads);
                    }
                    if need(*x) {
                        let mut dx = g;
                        for (p, plane) in dx.data_mut().chunks_mut(hw).enumerate() {
                            plane.iter_mut().for_each(|v| *v = *v * gv.data()[p]);
                        }
                        acc(*x, dx, &mut grads);
                    }
                }
                Op::MulSpatial { x, gate } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gate);
                    let [n, c, h, w] = xv.shape();
                    let hw = h * w;
                    if need(*gate) {
                        let mut dg = Tensor::zeros([n, 1, h, w]);
                        for s in 0..n {
                            for ch in 0..c {
                                let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                                let out = &mut dg.data_mut()[s * hw..(s + 1) * hw];
                                for ((o, &d), &v) in out.iter_mut().zip(&g.data()[r.clone()]).zip(&xv.data()[r]) {
                                    *o = *o + d * v;
                                }
                            }
                        }
                        acc(*gate, dg, &mut grads);
                    }
                    if need(*x) {
                        let mut dx = g;
                        for s in 0..n {
                            for ch in 0..c {
                                let plane = &mut dx.data_mut()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                                for (v, &gg) in plane.iter_mut().zip(&gv.data()[s * hw..(s + 1) * hw]) {
                                    *v = *v * gg;
                                }
                            }
                        }
                        acc(*x, dx, &mut grads);
                    }
                }
                Op::MaxPool { x, arg } | Op::GlobalMax { x, arg } | Op::ChannelMax { x, arg } => {
                    let dx = ops::scatter_argmax(self.shape(*x), arg, &g);
                    acc(*x, dx, &mut grads);
                }
                Op::GlobalAvg(x) => {
                    let dx = ops::global_avg_pool_backward(self.shape(*x), &g);
                    acc(*x, dx, &mut grads);
                }
                Op::ChannelMean(x) => {
                    let dx = ops::channel_mean_backward(self.shape(*x), &g);
                    acc(*x, dx, &mut grads);
                }
                Op::Concat(a, b) => {
                    let [n, ca, h, w] = self.shape(*a);
                    let cb = self.shape(*b)[1];
                    let (pa, pb) = (ca * h * w, cb * h * w);
                    let mut da = Vec::with_capacity(n * pa);
                    let mut db = Vec::with_capacity(n * pb);
                    for s in 0..n {
                        let base = s * (pa + pb);
                        da.extend_from_slice(&g.data()[base..base + pa]);
                        db.extend_from_slice(&g.data()[base + pa..base + pa + pb]);
                    }
                    acc(*a, Tensor::from_vec([n, ca, h, w], da), &mut grads);
                    acc(*b, Tensor::from_vec([n, cb, h, w], db), &mut grads);
                }
                Op::Resize(x) => {
                    let dx = ops::bilinear_resize_backward(self.shape(*x), &g);
                    acc(*x, dx, &mut grads);
                }
                Op::Crop(x) => {
                    let [n, c, h, w] = self.shape(*x);
                    let [_, _, oh, ow] = g.shape();
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for p in 0..n * c {
                        for y in 0..oh {
                            let d = p * h * w + y * w;
                            let s = p * oh * ow + y * ow;
                            dx.data_mut()[d..d + ow].copy_from_slice(&g.data()[s..s + ow]);
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::CrossEntropy { logits, labels, count } => {
                    let up = g.data()[0];
                    let dx = ops::softmax_cross_entropy_backward(self.value(*logits), labels, *count, up);
                    acc(*logits, dx, &mut grads);
                }
            }
        }
        Gradients { grads: param_grads }
    }
}
