//! Tape-based reverse-mode automatic differentiation.
//!
//! A `Session` records every forward op into an append-only node list; ids
//! grow in topological order, so one reverse sweep over the list visits each
//! op exactly once. A session's tape is single-use: after `backward` it
//! refuses further work.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::ops;
use crate::params::{ParamId, ParameterSet};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValId(usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Conv2d { x: ValId, k: ValId, pad: usize },
    BiasChannel { x: ValId, b: ValId },
    BatchNorm { x: ValId, gamma: ValId, beta: ValId, train: bool, xhat: Vec<f32>, invstd: Vec<f64> },
    Relu { x: ValId },
    Sigmoid { x: ValId },
    Tanh { x: ValId },
    Add { a: ValId, b: ValId },
    Mul { a: ValId, b: ValId },
    Affine { w: ValId, x: ValId, b: Option<ValId> },
    Slice { x: ValId, start: usize, len: usize },
    Concat0 { parts: Vec<ValId> },
    CenterPixel { x: ValId, row: usize, col: usize },
    SpatialMean { x: ValId },
    BroadcastPlane { x: ValId },
    EmbedRow { table: ValId, index: usize },
    SumSqDiff { a: ValId, b: ValId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BiasChannel { .. } => "bias_channel",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Affine { .. } => "affine",
            Op::Slice { .. } => "slice",
            Op::Concat0 { .. } => "concat0",
            Op::CenterPixel { .. } => "center_pixel",
            Op::SpatialMean { .. } => "spatial_mean",
            Op::BroadcastPlane { .. } => "broadcast_plane",
            Op::EmbedRow { .. } => "embed_row",
            Op::SumSqDiff { .. } => "sum_sq_diff",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

pub struct Session<'p> {
    params: &'p mut ParameterSet,
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, ValId>,
    consumed: bool,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p mut ParameterSet) -> Self {
        Self { params, nodes: Vec::new(), param_leaves: HashMap::new(), consumed: false }
    }

    pub fn params(&self) -> &ParameterSet {
        self.params
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Result<ValId> {
        value.check_finite(op.name())?;
        let id = ValId(self.nodes.len());
        self.nodes.push(Node { op, value, needs_grad });
        Ok(id)
    }

    fn needs(&self, id: ValId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Inserts a constant leaf; gradients are never propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Result<ValId> {
        self.push(Op::Leaf { param: None }, value, false)
    }

    /// Inserts (or reuses) the leaf for a parameter. Gradient contributions
    /// from every consumer accumulate into the parameter's slot.
    pub fn param(&mut self, id: ParamId) -> ValId {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let value = self.params.value(id).clone();
        let vid = ValId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf { param: Some(id) }, value, needs_grad: true });
        self.param_leaves.insert(id, vid);
        vid
    }

    pub fn conv2d(&mut self, x: ValId, k: ValId, pad: usize) -> Result<ValId> {
        let (xs, ks) = (self.value(x).shape().to_vec(), self.value(k).shape().to_vec());
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] || ks[2] != ks[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?} kernel {:?}", xs, ks),
            });
        }
        if ks[2] % 2 == 0 || pad != (ks[2] - 1) / 2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel size {} needs padding {}, got {}", ks[2], (ks[2] - 1) / 2, pad),
            });
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let out = ops::conv2d_forward(
            self.value(x).data(),
            c_in,
            h,
            w,
            self.value(k).data(),
            ks[0],
            ks[2],
            pad,
        );
        let needs = self.needs(x) || self.needs(k);
        self.push(Op::Conv2d { x, k, pad }, Tensor::new(vec![ks[0], h, w], out)?, needs)
    }

    /// Adds a per-channel bias to a `[c, h, w]` feature map.
    pub fn bias_channel(&mut self, x: ValId, b: ValId) -> Result<ValId> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 3 || bs != vec![xs[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_channel",
                detail: format!("input {:?} bias {:?}", xs, bs),
            });
        }
        let plane = xs[1] * xs[2];
        let mut out = self.value(x).data().to_vec();
        let bd = self.value(b).data();
        for c in 0..xs[0] {
            let bv = bd[c];
            for v in &mut out[c * plane..(c + 1) * plane] {
                *v += bv;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(Op::BiasChannel { x, b }, Tensor::new(xs, out)?, needs)
    }

    /// Batch normalization over the spatial extent of a `[c, h, w]` map.
    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates with momentum 0.1; eval mode normalizes with the
    /// stored running statistics and never mutates them.
    pub fn batch_norm(
        &mut self,
        x: ValId,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        train: bool,
    ) -> Result<ValId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                detail: format!("expected [c, h, w], got {:?}", xs),
            });
        }
        let (c, n) = (xs[0], xs[1] * xs[2]);
        if train && n < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                detail: format!("train mode needs at least 2 values per channel, got {}", n),
            });
        }
        for pid in [gamma, beta, running_mean, running_var] {
            if self.params.value(pid).len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    detail: format!(
                        "parameter {:?} has {} values for {} channels",
                        self.params.name(pid),
                        self.params.value(pid).len(),
                        c
                    ),
                });
            }
        }
        let (mean, var) = if train {
            let (mean, var) = ops::bn_stats(self.value(x).data(), c, n);
            for i in 0..c {
                let rm = self.params.value_mut(running_mean).data_mut();
                rm[i] = ((1.0 - BN_MOMENTUM) * rm[i] as f64 + BN_MOMENTUM * mean[i]) as f32;
                let rv = self.params.value_mut(running_var).data_mut();
                rv[i] = ((1.0 - BN_MOMENTUM) * rv[i] as f64 + BN_MOMENTUM * var[i]) as f32;
            }
            (mean, var)
        } else {
            let rm = self.params.value(running_mean).data().iter().map(|&v| v as f64).collect();
            let rv = self.params.value(running_var).data().iter().map(|&v| v as f64).collect();
            (rm, rv)
        };
        let g = self.param(gamma);
        let b = self.param(beta);
        let (y, xhat, invstd) = ops::bn_normalize(
            self.value(x).data(),
            c,
            n,
            &mean,
            &var,
            BN_EPS,
            self.value(g).data(),
            self.value(b).data(),
        );
        let needs = self.needs(x) || self.needs(g) || self.needs(b);
        self.push(
            Op::BatchNorm { x, gamma: g, beta: b, train, xhat, invstd },
            Tensor::new(xs, y)?,
            needs,
        )
    }

    pub fn relu(&mut self, x: ValId) -> Result<ValId> {
        let t = self.value(x);
        let out: Vec<f32> = t.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Op::Relu { x }, Tensor::new(shape, out)?, needs)
    }

    pub fn sigmoid(&mut self, x: ValId) -> Result<ValId> {
        let t = self.value(x);
        let out: Vec<f32> = t
            .data()
            .iter()
            .map(|&v| {
                let v = v as f64;
                let y = if v >= 0.0 { 1.0 / (1.0 + (-v).exp()) } else { let e = v.exp(); e / (1.0 + e) };
                y as f32
            })
            .collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Op::Sigmoid { x }, Tensor::new(shape, out)?, needs)
    }

    pub fn tanh(&mut self, x: ValId) -> Result<ValId> {
        let t = self.value(x);
        let out: Vec<f32> = t.data().iter().map(|&v| (v as f64).tanh() as f32).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Op::Tanh { x }, Tensor::new(shape, out)?, needs)
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.elementwise(a, b, "add")
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.elementwise(a, b, "mul")
    }

    fn elementwise(&mut self, a: ValId, b: ValId, which: &'static str) -> Result<ValId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: if which == "add" { "add" } else { "mul" },
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let out: Vec<f32> = if which == "add" {
            ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect()
        };
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        let op = if which == "add" { Op::Add { a, b } } else { Op::Mul { a, b } };
        self.push(op, Tensor::new(shape, out)?, needs)
    }

    /// `y = W x (+ b)` for a `[m, n]` matrix, an `[n]` vector and an
    /// optional `[m]` bias.
    pub fn affine(&mut self, w: ValId, x: ValId, b: Option<ValId>) -> Result<ValId> {
        let ws = self.value(w).shape().to_vec();
        let xs = self.value(x).shape().to_vec();
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                detail: format!("matrix {:?} input {:?}", ws, xs),
            });
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[0]] {
                return Err(TensorError::ShapeMismatch {
                    op: "affine",
                    detail: format!("bias {:?} for matrix {:?}", self.value(b).shape(), ws),
                });
            }
        }
        let (m, n) = (ws[0], ws[1]);
        let wd = self.value(w).data();
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; m];
        for i in 0..m {
            let row = &wd[i * n..(i + 1) * n];
            let mut acc = 0.0f64;
            for j in 0..n {
                acc += row[j] as f64 * xd[j] as f64;
            }
            out[i] = acc as f32;
        }
        if let Some(b) = b {
            for (o, bv) in out.iter_mut().zip(self.value(b).data()) {
                *o += bv;
            }
        }
        let needs = self.needs(w) || self.needs(x) || b.map_or(false, |b| self.needs(b));
        self.push(Op::Affine { w, x, b }, Tensor::new(vec![m], out)?, needs)
    }

    /// Slice along axis 0, keeping trailing dimensions.
    pub fn slice(&mut self, x: ValId, start: usize, len: usize) -> Result<ValId> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                detail: format!("rows {}..{} of {:?}", start, start + len, shape),
            });
        }
        let stride: usize = shape[1..].iter().product();
        let out = t.data()[start * stride..(start + len) * stride].to_vec();
        let mut new_shape = shape.clone();
        new_shape[0] = len;
        let needs = self.needs(x);
        self.push(Op::Slice { x, start, len }, Tensor::new(new_shape, out)?, needs)
    }

    /// Concatenate along axis 0; all parts must share trailing dimensions.
    pub fn concat0(&mut self, parts: &[ValId]) -> Result<ValId> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch { op: "concat0", detail: "no parts".into() });
        }
        let trailing = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.is_empty() || s[1..] != trailing[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat0",
                    detail: format!("trailing dims differ: {:?} vs {:?}", s, trailing),
                });
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * trailing.iter().product::<usize>().max(1));
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&trailing);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Op::Concat0 { parts: parts.to_vec() }, Tensor::new(shape, data)?, needs)
    }

    /// Extracts the channel column at one spatial position of a `[c, h, w]`
    /// map, giving a `[c]` vector.
    pub fn center_pixel(&mut self, x: ValId, row: usize, col: usize) -> Result<ValId> {
        let t = self.value(x);
        let s = t.shape().to_vec();
        if s.len() != 3 || row >= s[1] || col >= s[2] {
            return Err(TensorError::ShapeMismatch {
                op: "center_pixel",
                detail: format!("({row}, {col}) of {:?}", s),
            });
        }
        let plane = s[1] * s[2];
        let out: Vec<f32> = (0..s[0]).map(|c| t.data()[c * plane + row * s[2] + col]).collect();
        let needs = self.needs(x);
        self.push(Op::CenterPixel { x, row, col }, Tensor::new(vec![s[0]], out)?, needs)
    }

    /// Channel-wise mean over the spatial extent of a `[c, h, w]` map.
    pub fn spatial_mean(&mut self, x: ValId) -> Result<ValId> {
        let t = self.value(x);
        let s = t.shape().to_vec();
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "spatial_mean",
                detail: format!("expected [c, h, w], got {:?}", s),
            });
        }
        let n = s[1] * s[2];
        let out: Vec<f32> = (0..s[0])
            .map(|c| {
                let sum: f64 = t.data()[c * n..(c + 1) * n].iter().map(|&v| v as f64).sum();
                (sum / n as f64) as f32
            })
            .collect();
        let needs = self.needs(x);
        self.push(Op::SpatialMean { x }, Tensor::new(vec![s[0]], out)?, needs)
    }

    /// Broadcasts a single value to a constant `[1, rows, cols]` plane.
    pub fn broadcast_plane(&mut self, x: ValId, rows: usize, cols: usize) -> Result<ValId> {
        let t = self.value(x);
        if t.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_plane",
                detail: format!("expected a single value, got {:?}", t.shape()),
            });
        }
        let out = vec![t.data()[0]; rows * cols];
        let needs = self.needs(x);
        self.push(Op::BroadcastPlane { x }, Tensor::new(vec![1, rows, cols], out)?, needs)
    }

    /// Looks up one row of an embedding table `[rows, dim]`.
    pub fn embed(&mut self, table: ValId, index: usize) -> Result<ValId> {
        let t = self.value(table);
        let s = t.shape().to_vec();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embed_row",
                detail: format!("table must be 2-d, got {:?}", s),
            });
        }
        if index >= s[0] {
            return Err(TensorError::EmbedIndex { index, rows: s[0] });
        }
        let out = t.data()[index * s[1]..(index + 1) * s[1]].to_vec();
        let needs = self.needs(table);
        self.push(Op::EmbedRow { table, index }, Tensor::new(vec![s[1]], out)?, needs)
    }

    /// Squared Euclidean distance between two same-shape tensors: the sum,
    /// not the mean, of squared differences.
    pub fn sum_sq_diff(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sum_sq_diff",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut acc = 0.0f64;
        for (x, y) in ta.data().iter().zip(tb.data()) {
            let d = *x as f64 - *y as f64;
            acc += d * d;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::SumSqDiff { a, b }, Tensor::scalar(acc as f32), needs)
    }

    /// Reverse sweep from a scalar loss. Gradients of every parameter leaf
    /// are accumulated into the parameter set; the tape is consumed.
    pub fn backward(&mut self, loss: ValId) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        self.consumed = true;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::LossNotScalar(self.nodes[loss.0].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if gy.iter().any(|g| g.is_nan()) {
                return Err(TensorError::NanGradient { op: node.op.name() });
            }
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        self.params.accumulate_grad(*pid, &gy);
                    }
                }
                Op::Conv2d { x, k, pad } => {
                    let (x, k, pad) = (*x, *k, *pad);
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let ks = self.nodes[k.0].value.shape().to_vec();
                    let (c_in, h, w) = (xs[0], xs[1], xs[2]);
                    if self.nodes[x.0].needs_grad {
                        let kd = self.nodes[k.0].value.data();
                        let buf = Self::buf(&mut grads, x, c_in * h * w);
                        ops::conv2d_backward_input(&gy, kd, c_in, ks[0], h, w, ks[2], pad, buf);
                    }
                    if self.nodes[k.0].needs_grad {
                        let xd = self.nodes[x.0].value.data();
                        let buf = Self::buf(&mut grads, k, ks.iter().product());
                        ops::conv2d_backward_kernel(&gy, xd, c_in, ks[0], h, w, ks[2], pad, buf);
                    }
                }
                Op::BiasChannel { x, b } => {
                    let (x, b) = (*x, *b);
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let plane = xs[1] * xs[2];
                    if self.nodes[x.0].needs_grad {
                        let buf = Self::buf(&mut grads, x, gy.len());
                        for (g, u) in buf.iter_mut().zip(&gy) {
                            *g += u;
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let buf = Self::buf(&mut grads, b, xs[0]);
                        for c in 0..xs[0] {
                            buf[c] += gy[c * plane..(c + 1) * plane].iter().sum::<f64>();
                        }
                    }
                }
                Op::BatchNorm { x, gamma, beta, train, xhat, invstd } => {
                    let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let (c, n) = (xs[0], xs[1] * xs[2]);
                    let gd = self.nodes[gamma.0].value.data().to_vec();
                    let mut gx = vec![0.0f64; c * n];
                    let mut ggamma = vec![0.0f64; c];
                    let mut gbeta = vec![0.0f64; c];
                    if train {
                        ops::bn_backward_train(&gy, xhat, invstd, &gd, c, n, &mut gx, &mut ggamma, &mut gbeta);
                    } else {
                        ops::bn_backward_eval(&gy, xhat, invstd, &gd, c, n, &mut gx, &mut ggamma, &mut gbeta);
                    }
                    if self.nodes[x.0].needs_grad {
                        let buf = Self::buf(&mut grads, x, c * n);
                        for (g, u) in buf.iter_mut().zip(&gx) {
                            *g += u;
                        }
                    }
                    for (vid, contrib) in [(gamma, &ggamma), (beta, &gbeta)] {
                        if self.nodes[vid.0].needs_grad {
                            let buf = Self::buf(&mut grads, vid, c);
                            for (g, u) in buf.iter_mut().zip(contrib) {
                                *g += u;
                            }
                        }
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    if self.nodes[x.0].needs_grad {
                        let y = self.nodes[idx].value.data();
                        let buf = Self::buf(&mut grads, x, gy.len());
                        for i in 0..gy.len() {
                            if y[i] > 0.0 {
                                buf[i] += gy[i];
                            }
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    if self.nodes[x.0].needs_grad {
                        let y = self.nodes[idx].value.data();
                        let buf = Self::buf(&mut grads, x, gy.len());
                        for i in 0..gy.len() {
                            let yi = y[i] as f64;
                            buf[i] += gy[i] * yi * (1.0 - yi);
                        }
                    }
                }
                Op::Tanh { x } => {
                    let x = *x;
                    if self.nodes[x.0].needs_grad {
                        let y = self.nodes[idx].value.data();
                        let buf = Self::buf(&mut grads, x, gy.len());
                        for i in 0..gy.len() {
                            let yi = y[i] as f64;
                            buf[i] += gy[i] * (1.0 - yi * yi);
                        }
                    }
                }
                Op::Add { a, b } => {
                    for vid in [*a, *b] {
                        if self.nodes[vid.0].needs_grad {
                            let buf = Self::buf(&mut grads, vid, gy.len());
                            for (g, u) in buf.iter_mut().zip(&gy) {
                                *g += u;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].needs_grad {
                        let bd = self.nodes[b.0].value.data().to_vec();
                        let buf = Self::buf(&mut grads, a, gy.len());
                        for i in 0..gy.len() {
                            buf[i] += gy[i] * bd[i] as f64;
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let ad = self.nodes[a.0].value.data().to_vec();
                        let buf = Self::buf(&mut grads, b, gy.len());
                        for i in 0..gy.len() {
                            buf[i] += gy[i] * ad[i] as f64;
                        }
                    }
                }
                Op::Affine { w, x, b } => {
                    let (w, x, b) = (*w, *x, *b);
                    let ws = self.nodes[w.0].value.shape().to_vec();
                    let (m, n) = (ws[0], ws[1]);
                    if self.nodes[w.0].needs_grad {
                        let xd = self.nodes[x.0].value.data().to_vec();
                        let buf = Self::buf(&mut grads, w, m * n);
                        for i in 0..m {
                            let gyi = gy[i];
                            for j in 0..n {
                                buf[i * n + j] += gyi * xd[j] as f64;
                            }
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        let wd = self.nodes[w.0].value.data().to_vec();
                        let buf = Self::buf(&mut grads, x, n);
                        for i in 0..m {
                            let gyi = gy[i];
                            let row = &wd[i * n..(i + 1) * n];
                            for j in 0..n {
                                buf[j] += gyi * row[j] as f64;
                            }
                        }
                    }
                    if let Some(b) = b {
                        if self.nodes[b.0].needs_grad {
                            let buf = Self::buf(&mut grads, b, m);
                            for (g, u) in buf.iter_mut().zip(&gy) {
                                *g += u;
                            }
                        }
                    }
                }
                Op::Slice { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    if self.nodes[x.0].needs_grad {
                        let shape = self.nodes[x.0].value.shape().to_vec();
                        let stride: usize = shape[1..].iter().product();
                        debug_assert_eq!(gy.len(), len * stride.max(1));
                        let buf = Self::buf(&mut grads, x, shape.iter().product());
                        for (i, u) in gy.iter().enumerate() {
                            buf[start * stride + i] += u;
                        }
                    }
                }
                Op::Concat0 { parts } => {
                    let parts = parts.clone();
                    let mut offset = 0usize;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        if self.nodes[p.0].needs_grad {
                            let buf = Self::buf(&mut grads, p, len);
                            for (g, u) in buf.iter_mut().zip(&gy[offset..offset + len]) {
                                *g += u;
                            }
                        }
                        offset += len;
                    }
                }
                Op::CenterPixel { x, row, col } => {
                    let (x, row, col) = (*x, *row, *col);
                    if self.nodes[x.0].needs_grad {
                        let s = self.nodes[x.0].value.shape().to_vec();
                        let plane = s[1] * s[2];
                        let buf = Self::buf(&mut grads, x, s[0] * plane);
                        for c in 0..s[0] {
                            buf[c * plane + row * s[2] + col] += gy[c];
                        }
                    }
                }
                Op::SpatialMean { x } => {
                    let x = *x;
                    if self.nodes[x.0].needs_grad {
                        let s = self.nodes[x.0].value.shape().to_vec();
                        let n = s[1] * s[2];
                        let buf = Self::buf(&mut grads, x, s[0] * n);
                        for c in 0..s[0] {
                            let u = gy[c] / n as f64;
                            for g in &mut buf[c * n..(c + 1) * n] {
                                *g += u;
                            }
                        }
                    }
                }
                Op::BroadcastPlane { x } => {
                    let x = *x;
                    if self.nodes[x.0].needs_grad {
                        let buf = Self::buf(&mut grads, x, 1);
                        buf[0] += gy.iter().sum::<f64>();
                    }
                }
                Op::EmbedRow { table, index } => {
                    let (table, index) = (*table, *index);
                    if self.nodes[table.0].needs_grad {
                        let s = self.nodes[table.0].value.shape().to_vec();
                        let buf = Self::buf(&mut grads, table, s[0] * s[1]);
                        for (d, u) in gy.iter().enumerate() {
                            buf[index * s[1] + d] += u;
                        }
                    }
                }
                Op::SumSqDiff { a, b } => {
                    let (a, b) = (*a, *b);
                    let g0 = gy[0];
                    let ad = self.nodes[a.0].value.data().to_vec();
                    let bd = self.nodes[b.0].value.data().to_vec();
                    if self.nodes[a.0].needs_grad {
                        let buf = Self::buf(&mut grads, a, ad.len());
                        for i in 0..ad.len() {
                            buf[i] += g0 * 2.0 * (ad[i] as f64 - bd[i] as f64);
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let buf = Self::buf(&mut grads, b, bd.len());
                        for i in 0..bd.len() {
                            buf[i] -= g0 * 2.0 * (ad[i] as f64 - bd[i] as f64);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn buf(grads: &mut [Option<Vec<f64>>], id: ValId, len: usize) -> &mut Vec<f64> {
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0f64; len]);
        }
        slot.as_mut().unwrap()
    }
}
