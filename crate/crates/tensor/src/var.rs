//! Reverse-mode automatic differentiation on a dynamically built graph.
//!
//! A [`Var`] is a reference-counted node holding its forward value and, when
//! any input requires a gradient, the operation that produced it. Nodes that
//! do not require gradients keep no parents, so inference-only graphs free
//! intermediate tensors as soon as they go out of scope.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::conv::{self, Conv2dSpec};
use crate::tensor::{broadcast_index_map, broadcast_shape, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// A node in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    op: Option<Op>,
}

enum Op {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    StackTemporal(Vec<Var>),
    GlobalAvgPool(Var),
    Sum(Var),
    /// Scalar-valued op whose Jacobian w.r.t. its input was computed in the
    /// forward pass.
    Scalar {
        x: Var,
        local_grad: Tensor,
    },
}

impl Op {
    fn inputs(&self) -> Vec<&Var> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::GlobalAvgPool(a)
            | Op::Sum(a) => vec![a],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b.iter());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Concat { parts, .. } | Op::StackTemporal(parts) => parts.iter().collect(),
            Op::Narrow { x, .. } | Op::Scalar { x, .. } => vec![x],
        }
    }
}

/// Gradients keyed by node, produced by [`Var::backward`].
#[derive(Default)]
pub struct Gradients {
    grads: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.grads.get(&var.0.id)
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence the
    /// differentiated output.
    pub fn get_or_zeros(&self, var: &Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }

    fn accumulate(&mut self, var: &Var, grad: Tensor) {
        if !var.0.requires_grad {
            return;
        }
        match self.grads.get_mut(&var.0.id) {
            Some(existing) => existing.add_assign(&grad),
            None => {
                self.grads.insert(var.0.id, grad);
            }
        }
    }
}

impl Var {
    /// A leaf that gradients flow into.
    pub fn parameter(value: Tensor) -> Self {
        Self::leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false)
    }

    fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            op: None,
        }))
    }

    fn from_op(value: Tensor, op: Op) -> Self {
        let requires_grad = op.inputs().iter().any(|v| v.0.requires_grad);
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            op: requires_grad.then_some(op),
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Identity of the underlying node.
    pub fn id(&self) -> u64 {
        self.0.id
    }

    // ---- elementwise ------------------------------------------------------

    fn broadcast_binary(&self, other: &Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (a, b) = (self.value(), other.value());
        if a.shape() == b.shape() {
            return a.zip_map(b, f);
        }
        let shape = broadcast_shape(a.shape(), b.shape());
        let ia = broadcast_index_map(a.shape(), &shape);
        let ib = broadcast_index_map(b.shape(), &shape);
        let data = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
            .collect();
        Tensor::new(&shape, data)
    }

    /// Elementwise sum with same-rank broadcasting.
    pub fn add(&self, other: &Var) -> Var {
        let value = self.broadcast_binary(other, |a, b| a + b);
        Var::from_op(value, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = self.broadcast_binary(other, |a, b| a - b);
        Var::from_op(value, Op::Sub(self.clone(), other.clone()))
    }

    /// Elementwise product with same-rank broadcasting.
    pub fn mul(&self, other: &Var) -> Var {
        let value = self.broadcast_binary(other, |a, b| a * b);
        Var::from_op(value, Op::Mul(self.clone(), other.clone()))
    }

    pub fn scale(&self, k: f64) -> Var {
        Var::from_op(self.value().map(|v| v * k), Op::Scale(self.clone(), k))
    }

    pub fn sigmoid(&self) -> Var {
        Var::from_op(self.value().map(sigmoid), Op::Sigmoid(self.clone()))
    }

    pub fn tanh(&self) -> Var {
        Var::from_op(self.value().map(f64::tanh), Op::Tanh(self.clone()))
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let value = self.value().map(|v| if v > 0.0 { v } else { slope * v });
        Var::from_op(value, Op::LeakyRelu(self.clone(), slope))
    }

    // ---- convolution ------------------------------------------------------

    /// 2D convolution; `self` is `(b, cin, h, w)`, `weight` is
    /// `(cout, cin, kh, kw)`, `bias` is `(cout)`.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, spec: Conv2dSpec) -> Var {
        let xs = self.value().dims4();
        let ws = weight.value().dims4();
        let (data, (ho, wo)) = conv::conv2d_forward(
            self.value().data(),
            xs,
            weight.value().data(),
            ws,
            bias.map(|b| b.value().data()),
            &spec,
        );
        Var::from_op(
            Tensor::new(&[xs.0, ws.0, ho, wo], data),
            Op::Conv2d {
                x: self.clone(),
                w: weight.clone(),
                b: bias.cloned(),
                spec,
            },
        )
    }

    /// Transposed convolution without padding; `weight` is
    /// `(cin, cout, kh, kw)`.
    pub fn conv_transpose2d(&self, weight: &Var, bias: Option<&Var>, stride: (usize, usize)) -> Var {
        let xs = self.value().dims4();
        let ws = weight.value().dims4();
        let (data, (ho, wo)) = conv::conv_transpose2d_forward(
            self.value().data(),
            xs,
            weight.value().data(),
            ws,
            bias.map(|b| b.value().data()),
            stride,
        );
        Var::from_op(
            Tensor::new(&[xs.0, ws.1, ho, wo], data),
            Op::ConvTranspose2d {
                x: self.clone(),
                w: weight.clone(),
                b: bias.cloned(),
                stride,
            },
        )
    }

    // ---- normalization ----------------------------------------------------

    /// Batch normalization over `(batch, height, width)` per channel using
    /// the statistics of this batch. Returns the output together with the
    /// per-channel batch mean and biased variance.
    pub fn batch_norm_train(&self, gamma: &Var, beta: &Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let (b, c, h, w) = self.value().dims4();
        let x = self.value().data();
        let n = (b * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                s += x[(bi * c + ch) * h * w..][..h * w].iter().sum::<f64>();
            }
            mean[ch] = s / n;
            let mut sq = 0.0;
            for bi in 0..b {
                sq += x[(bi * c + ch) * h * w..][..h * w]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
            var[ch] = sq / n;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.normalize_with(gamma, beta, &mean, inv_std, true);
        (out, mean, var)
    }

    /// Batch normalization with frozen running statistics.
    pub fn batch_norm_eval(&self, gamma: &Var, beta: &Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize_with(gamma, beta, mean, inv_std, false)
    }

    fn normalize_with(&self, gamma: &Var, beta: &Var, mean: &[f64], inv_std: Vec<f64>, batch_stats: bool) -> Var {
        let (b, c, h, w) = self.value().dims4();
        assert_eq!(gamma.value().numel(), c, "batch norm gamma size");
        assert_eq!(beta.value().numel(), c, "batch norm beta size");
        assert_eq!(mean.len(), c, "batch norm statistics size");
        let x = self.value().data();
        let (g, bt) = (gamma.value().data(), beta.value().data());
        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * h * w;
                for i in off..off + h * w {
                    let xn = (x[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xn;
                    out[i] = g[ch] * xn + bt[ch];
                }
            }
        }
        let shape = self.shape().to_vec();
        Var::from_op(
            Tensor::new(&shape, out),
            Op::BatchNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                normalized: Tensor::new(&shape, normalized),
                inv_std,
                batch_stats,
            },
        )
    }

    // ---- shape manipulation -----------------------------------------------

    /// Concatenates rank-4 tensors along `axis` (0 = batch, 1 = channels).
    pub fn concat(parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        assert!(axis < 2, "concat supports the batch and channel axes");
        let first = parts[0].value().dims4();
        let mut total = 0;
        for p in parts {
            let d = p.value().dims4();
            let (same_other, along) = if axis == 0 {
                ((d.1, d.2, d.3) == (first.1, first.2, first.3), d.0)
            } else {
                ((d.0, d.2, d.3) == (first.0, first.2, first.3), d.1)
            };
            assert!(same_other, "concat shape mismatch: {:?} vs {:?}", p.shape(), parts[0].shape());
            total += along;
        }
        let (b, c, h, w) = first;
        let shape = if axis == 0 { [total, c, h, w] } else { [b, total, h, w] };
        let mut data = Vec::with_capacity(shape.iter().product());
        if axis == 0 {
            for p in parts {
                data.extend_from_slice(p.value().data());
            }
        } else {
            for bi in 0..b {
                for p in parts {
                    let pc = p.shape()[1];
                    data.extend_from_slice(&p.value().data()[bi * pc * h * w..(bi + 1) * pc * h * w]);
                }
            }
        }
        Var::from_op(
            Tensor::new(&shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Slice `[start, start + len)` along `axis` (0 = batch, 1 = channels).
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        assert!(axis < 2, "narrow supports the batch and channel axes");
        let (b, c, h, w) = self.value().dims4();
        let extent = if axis == 0 { b } else { c };
        assert!(start + len <= extent, "narrow [{start}, {}) out of {extent}", start + len);
        let src = self.value().data();
        let (shape, data) = if axis == 0 {
            ([len, c, h, w], src[start * c * h * w..(start + len) * c * h * w].to_vec())
        } else {
            let mut data = Vec::with_capacity(b * len * h * w);
            for bi in 0..b {
                data.extend_from_slice(&src[(bi * c + start) * h * w..(bi * c + start + len) * h * w]);
            }
            ([b, len, h, w], data)
        };
        Var::from_op(
            Tensor::new(&shape, data),
            Op::Narrow {
                x: self.clone(),
                axis,
                start,
            },
        )
    }

    /// Stacks `T` tensors of `(b, c, h, w)` into `(b, c * T, h, w)` with
    /// channel index `c * T + t`, i.e. a `(b, c, T, h, w)` volume.
    pub fn stack_temporal(frames: &[Var]) -> Var {
        assert!(!frames.is_empty(), "stack of nothing");
        let (b, c, h, w) = frames[0].value().dims4();
        for f in frames {
            assert_eq!(f.value().dims4(), (b, c, h, w), "stack_temporal shape mismatch");
        }
        let t = frames.len();
        let plane = h * w;
        let mut data = vec![0.0; b * c * t * plane];
        for (ti, f) in frames.iter().enumerate() {
            let src = f.value().data();
            for bi in 0..b {
                for ch in 0..c {
                    let dst = ((bi * c + ch) * t + ti) * plane;
                    data[dst..dst + plane].copy_from_slice(&src[(bi * c + ch) * plane..][..plane]);
                }
            }
        }
        Var::from_op(Tensor::new(&[b, c * t, h, w], data), Op::StackTemporal(frames.to_vec()))
    }

    /// Mean over height and width: `(b, c, h, w) -> (b, c, 1, 1)`.
    pub fn global_avg_pool(&self) -> Var {
        let (b, c, h, w) = self.value().dims4();
        let data = self
            .value()
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().sum::<f64>() / (h * w) as f64)
            .collect();
        Var::from_op(Tensor::new(&[b, c, 1, 1], data), Op::GlobalAvgPool(self.clone()))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Var {
        Var::from_op(Tensor::scalar(self.value().sum()), Op::Sum(self.clone()))
    }

    /// A scalar-valued function of `self` whose value and gradient were
    /// computed by the caller.
    pub fn scalar_fn(&self, value: f64, local_grad: Tensor) -> Var {
        assert_eq!(local_grad.shape(), self.shape(), "scalar_fn gradient shape");
        Var::from_op(
            Tensor::scalar(value),
            Op::Scalar {
                x: self.clone(),
                local_grad,
            },
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode sweep from this single-element output.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.value().numel(), 1, "backward needs a scalar output");
        let mut grads = Gradients::default();
        if !self.requires_grad() {
            return grads;
        }
        // Node ids increase in creation order, so descending id order is a
        // valid reverse topological order.
        let mut order: Vec<Var> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || !seen.insert(v.0.id) {
                continue;
            }
            if let Some(op) = &v.0.op {
                for p in op.inputs() {
                    stack.push(p.clone());
                }
            }
            order.push(v);
        }
        order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        grads.accumulate(self, Tensor::new(self.shape(), vec![1.0]));
        for node in &order {
            let Some(op) = &node.0.op else { continue };
            let Some(g) = grads.grads.remove(&node.0.id) else {
                continue;
            };
            node.propagate(op, &g, &mut grads);
            grads.grads.insert(node.0.id, g);
        }
        grads
    }

    fn propagate(&self, op: &Op, g: &Tensor, grads: &mut Gradients) {
        let out = self.value();
        match op {
            Op::Add(a, b) => {
                grads.accumulate(a, reduce_to(g, a.shape()));
                grads.accumulate(b, reduce_to(g, b.shape()));
            }
            Op::Sub(a, b) => {
                grads.accumulate(a, reduce_to(g, a.shape()));
                if b.requires_grad() {
                    grads.accumulate(b, reduce_to(&g.map(|v| -v), b.shape()));
                }
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let gb = broadcast_to(b.value(), g.shape());
                    grads.accumulate(a, reduce_to(&g.zip_map(&gb, |x, y| x * y), a.shape()));
                }
                if b.requires_grad() {
                    let ga = broadcast_to(a.value(), g.shape());
                    grads.accumulate(b, reduce_to(&g.zip_map(&ga, |x, y| x * y), b.shape()));
                }
            }
            Op::Scale(a, k) => grads.accumulate(a, g.map(|v| v * k)),
            Op::Sigmoid(a) => grads.accumulate(a, g.zip_map(out, |gv, s| gv * s * (1.0 - s))),
            Op::Tanh(a) => grads.accumulate(a, g.zip_map(out, |gv, t| gv * (1.0 - t * t))),
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                grads.accumulate(a, g.zip_map(a.value(), |gv, x| if x > 0.0 { gv } else { slope * gv }));
            }
            Op::Conv2d { x, w, b, spec } => {
                let need = (
                    x.requires_grad(),
                    w.requires_grad(),
                    b.as_ref().is_some_and(Var::requires_grad),
                );
                let r = conv::conv2d_backward(
                    x.value().data(),
                    x.value().dims4(),
                    w.value().data(),
                    w.value().dims4(),
                    spec,
                    g.data(),
                    need,
                );
                accumulate_conv(grads, x, w, b.as_ref(), r);
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                let need = (
                    x.requires_grad(),
                    w.requires_grad(),
                    b.as_ref().is_some_and(Var::requires_grad),
                );
                let r = conv::conv_transpose2d_backward(
                    x.value().data(),
                    x.value().dims4(),
                    w.value().data(),
                    w.value().dims4(),
                    *stride,
                    g.data(),
                    need,
                );
                accumulate_conv(grads, x, w, b.as_ref(), r);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let (b, c, h, w) = g.dims4();
                let (gd, xn) = (g.data(), normalized.data());
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * h * w;
                        for i in off..off + h * w {
                            dgamma[ch] += gd[i] * xn[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if x.requires_grad() {
                    let gamma_v = gamma.value().data();
                    let n = (b * h * w) as f64;
                    let mut dx = vec![0.0; gd.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * h * w;
                            let scale = gamma_v[ch] * inv_std[ch];
                            for i in off..off + h * w {
                                dx[i] = if *batch_stats {
                                    scale * (gd[i] - dbeta[ch] / n - xn[i] * dgamma[ch] / n)
                                } else {
                                    scale * gd[i]
                                };
                            }
                        }
                    }
                    grads.accumulate(x, Tensor::new(g.shape(), dx));
                }
                grads.accumulate(gamma, Tensor::new(gamma.shape(), dgamma));
                grads.accumulate(beta, Tensor::new(beta.shape(), dbeta));
            }
            Op::Concat { parts, axis } => {
                let (b, _, h, w) = g.dims4();
                let total_c = g.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let (pb, pc, _, _) = p.value().dims4();
                    if p.requires_grad() {
                        let data = if *axis == 0 {
                            g.data()[offset * total_c * h * w..(offset + pb) * total_c * h * w].to_vec()
                        } else {
                            let mut d = Vec::with_capacity(b * pc * h * w);
                            for bi in 0..b {
                                d.extend_from_slice(&g.data()[(bi * total_c + offset) * h * w..][..pc * h * w]);
                            }
                            d
                        };
                        grads.accumulate(p, Tensor::new(p.shape(), data));
                    }
                    offset += if *axis == 0 { pb } else { pc };
                }
            }
            Op::Narrow { x, axis, start } => {
                let (b, c, h, w) = x.value().dims4();
                let mut dx = vec![0.0; b * c * h * w];
                if *axis == 0 {
                    dx[start * c * h * w..][..g.numel()].copy_from_slice(g.data());
                } else {
                    let len = g.shape()[1];
                    for bi in 0..b {
                        dx[(bi * c + start) * h * w..][..len * h * w]
                            .copy_from_slice(&g.data()[bi * len * h * w..][..len * h * w]);
                    }
                }
                grads.accumulate(x, Tensor::new(x.shape(), dx));
            }
            Op::StackTemporal(frames) => {
                let t = frames.len();
                let (b, c, h, w) = frames[0].value().dims4();
                let plane = h * w;
                for (ti, f) in frames.iter().enumerate() {
                    if !f.requires_grad() {
                        continue;
                    }
                    let mut d = vec![0.0; b * c * plane];
                    for bi in 0..b {
                        for ch in 0..c {
                            d[(bi * c + ch) * plane..][..plane]
                                .copy_from_slice(&g.data()[((bi * c + ch) * t + ti) * plane..][..plane]);
                        }
                    }
                    grads.accumulate(f, Tensor::new(f.shape(), d));
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = x.value().dims4();
                let inv = 1.0 / (h * w) as f64;
                let mut dx = Vec::with_capacity(x.value().numel());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, h * w));
                }
                grads.accumulate(x, Tensor::new(x.shape(), dx));
            }
            Op::Sum(x) => {
                let gv = g.item();
                grads.accumulate(x, Tensor::full(x.shape(), gv));
            }
            Op::Scalar { x, local_grad } => {
                let gv = g.item();
                grads.accumulate(x, local_grad.map(|v| v * gv));
            }
        }
    }
}

fn accumulate_conv(grads: &mut Gradients, x: &Var, w: &Var, b: Option<&Var>, r: conv::ConvGrads) {
    if let Some(dx) = r.dx {
        grads.accumulate(x, Tensor::new(x.shape(), dx));
    }
    if let Some(dw) = r.dw {
        grads.accumulate(w, Tensor::new(w.shape(), dw));
    }
    if let (Some(b), Some(db)) = (b, r.db) {
        grads.accumulate(b, Tensor::new(b.shape(), db));
    }
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let map = broadcast_index_map(shape, g.shape());
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    for (&i, &v) in map.iter().zip(g.data()) {
        dst[i] += v;
    }
    out
}

fn broadcast_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let map = broadcast_index_map(t.shape(), shape);
    Tensor::new(shape, map.iter().map(|&i| t.data()[i]).collect())
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
