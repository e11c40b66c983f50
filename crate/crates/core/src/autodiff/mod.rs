//! Reverse-mode automatic differentiation over [`Tensor4`] values.
//!
//! A [`Tape`] records every operation in execution order, so parents always
//! precede children. [`Tape::backward`] walks the tape once in reverse and
//! accumulates gradients additively into each parent. A tape is meant to be
//! owned by one thread; independent tapes may run concurrently.

mod nn;

use crate::error::{Error, Result};
use crate::resample::{self, ResamplePlan, UpsampleMethod};
use crate::tensor::{Real, Shape, Tensor4};

pub use nn::BatchStats;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    SpatialSoftmax(Var),
    GroupMax { x: Var, group: usize, argmax: Vec<u32> },
    Narrow { x: Var, start: usize },
    Concat(Vec<Var>),
    ChannelScale { x: Var, scale: Vec<T> },
    Gap(Var),
    SpatialSum(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Upsample { x: Var, plan: ResamplePlan },
    Repeat { x: Var, k: usize },
    Conv(nn::ConvSaved),
    BatchNorm(nn::BatchNormSaved<T>),
    MaxPool { x: Var, argmax: Vec<u32> },
    Linear { x: Var, w: Var, b: Var },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Relu(x)
            | Op::SpatialSoftmax(x)
            | Op::Gap(x)
            | Op::SpatialSum(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::GroupMax { x, .. }
            | Op::Narrow { x, .. }
            | Op::ChannelScale { x, .. }
            | Op::Upsample { x, .. }
            | Op::Repeat { x, .. }
            | Op::MaxPool { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Concat(xs) => xs.clone(),
            Op::Conv(s) => {
                let mut v = vec![s.x, s.w];
                v.extend(s.b);
                v
            }
            Op::BatchNorm(s) => vec![s.x, s.gamma, s.beta],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
        }
    }
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or `None` if `v` is not a differentiable leaf or
    /// the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor4<T>, b: &Tensor4<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>, f: impl Fn(T, T) -> T) -> Tensor4<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor4::from_vec(a.shape(), data).expect("zip_map shapes checked by caller")
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parent handles of `v`, in argument order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    fn push(&mut self, name: &'static str, value: Tensor4<T>, op: Op<T>) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor4<T>, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor4<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor4<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// A copy of `x` through which no gradient flows.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b))
    }

    /// `alpha · x + beta`.
    pub fn affine(&mut self, x: Var, alpha: T, beta: T) -> Result<Var> {
        let out = self.value(x).map(|v| alpha * v + beta);
        self.push("affine", out, Op::Scale(x, alpha))
    }

    pub fn scale(&mut self, x: Var, alpha: T) -> Result<Var> {
        self.affine(x, alpha, T::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(T::exp);
        self.push("exp", out, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(T::ln);
        self.push("log", out, Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push("relu", out, Op::Relu(x))
    }

    /// Softmax over the h×w positions of every (batch, channel) plane.
    pub fn spatial_softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let s = src.shape();
        if s.plane() == 0 {
            return Err(Error::dim("spatial_softmax", "empty spatial plane"));
        }
        let mut out = src.clone();
        for plane in out.data_mut().chunks_mut(s.plane()) {
            let m = plane.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in plane.iter_mut() {
                *v = (*v - m).exp();
                total = total + *v;
            }
            for v in plane.iter_mut() {
                *v = *v / total;
            }
        }
        self.push("spatial_softmax", out, Op::SpatialSoftmax(x))
    }

    /// Positionwise maximum over consecutive groups of `group` channels.
    /// Ties resolve to the first channel of the group.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let src = self.value(x);
        let s = src.shape();
        if group == 0 || !s.c.is_multiple_of(group) {
            return Err(Error::dim(
                "group_max",
                format!("{} channels not divisible into groups of {group}", s.c),
            ));
        }
        let groups = s.c / group;
        let os = Shape::new(s.n, groups, s.h, s.w);
        let p = s.plane();
        let mut out = Vec::with_capacity(os.numel());
        let mut argmax = Vec::with_capacity(os.numel());
        for n in 0..s.n {
            for g in 0..groups {
                for pos in 0..p {
                    let mut best = src.data()[s.index(n, g * group, 0, 0) + pos];
                    let mut arg = 0u32;
                    for m in 1..group {
                        let v = src.data()[s.index(n, g * group + m, 0, 0) + pos];
                        if v > best {
                            best = v;
                            arg = m as u32;
                        }
                    }
                    out.push(best);
                    argmax.push(arg);
                }
            }
        }
        let out = Tensor4::from_vec(os, out)?;
        self.push("group_max", out, Op::GroupMax { x, group, argmax })
    }

    /// Channels `[start, start + len)`.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow_channels(start, len)?;
        self.push("narrow_channels", out, Op::Narrow { x, start })
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = match xs.first() {
            Some(&v) => self.shape(v),
            None => return Err(Error::dim("concat_channels", "no inputs")),
        };
        let mut c = 0;
        for &v in xs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::dim("concat_channels", format!("{s} vs {first}")));
            }
            c += s.c;
        }
        let os = Shape::new(first.n, c, first.h, first.w);
        let mut data = Vec::with_capacity(os.numel());
        for n in 0..first.n {
            for &v in xs {
                let t = self.value(v);
                let item = t.shape().item();
                data.extend_from_slice(&t.data()[n * item..(n + 1) * item]);
            }
        }
        let out = Tensor4::from_vec(os, data)?;
        self.push("concat_channels", out, Op::Concat(xs.to_vec()))
    }

    /// Multiplies channel `c` of every batch item by the constant `scale[c]`.
    pub fn channel_scale(&mut self, x: Var, scale: &[T]) -> Result<Var> {
        let src = self.value(x);
        let s = src.shape();
        if scale.len() != s.c {
            return Err(Error::dim(
                "channel_scale",
                format!("{} scale entries for {} channels", scale.len(), s.c),
            ));
        }
        let mut out = src.clone();
        for (i, plane) in out.data_mut().chunks_mut(s.plane()).enumerate() {
            let k = scale[i % s.c];
            plane.iter_mut().for_each(|v| *v = *v * k);
        }
        self.push("channel_scale", out, Op::ChannelScale { x, scale: scale.to_vec() })
    }

    /// Global average pool to n×c×1×1.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let out = self.plane_reduce(x, true);
        self.push("gap", out, Op::Gap(x))
    }

    /// Spatial sum to n×c×1×1.
    pub fn spatial_sum(&mut self, x: Var) -> Result<Var> {
        let out = self.plane_reduce(x, false);
        self.push("spatial_sum", out, Op::SpatialSum(x))
    }

    fn plane_reduce(&self, x: Var, mean: bool) -> Tensor4<T> {
        let src = self.value(x);
        let s = src.shape();
        let denom = T::from_f(s.plane() as f64);
        let data = src
            .data()
            .chunks(s.plane().max(1))
            .map(|p| {
                let total: T = p.iter().copied().sum();
                if mean {
                    total / denom
                } else {
                    total
                }
            })
            .collect();
        Tensor4::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("plane_reduce shape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor4::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor4::scalar(t.sum() / T::from_f(t.len() as f64));
        self.push("mean", out, Op::Mean(x))
    }

    /// Batch-mean softmax cross entropy. Each batch item of `logits` is
    /// flattened into one score vector.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let s = t.shape();
        let classes = s.item();
        if labels.len() != s.n {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for batch of {}", labels.len(), s.n),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::contract(
                "cross_entropy",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        let mut probs = Vec::with_capacity(s.numel());
        let mut total = T::zero();
        for (row, &y) in t.data().chunks(classes).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total = total + (lse - row[y]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let out = Tensor4::scalar(total / T::from_f(s.n as f64));
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub fn upsample(&mut self, x: Var, method: UpsampleMethod, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        let plan = ResamplePlan::new(method, s.h, s.w, out_h, out_w)?;
        let out = plan.forward(self.value(x))?;
        self.push("upsample", out, Op::Upsample { x, plan })
    }

    /// Repeats each channel `k` times consecutively.
    pub fn channel_repeat(&mut self, x: Var, k: usize) -> Result<Var> {
        let out = resample::channel_repeat(self.value(x), k)?;
        self.push("channel_repeat", out, Op::Repeat { x, k })
    }

    /// Gradients of the scalar `loss` with respect to every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != Shape::scalar() {
            return Err(Error::contract(
                "backward",
                format!("root must be a scalar, got {}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                g.ensure_finite("backward")?;
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor4<T>>], v: Var, g: Tensor4<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor4<T>, grads: &mut [Option<Tensor4<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, zip_map(g, vb, |gv, x| gv * x));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, zip_map(g, va, |gv, x| gv * x));
                }
            }
            Op::Scale(x, alpha) => {
                let alpha = *alpha;
                self.accumulate(grads, *x, g.map(|v| v * alpha));
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, zip_map(g, y, |gv, s| gv * s * (T::one() - s)));
            }
            Op::Exp(x) => self.accumulate(grads, *x, zip_map(g, y, |gv, e| gv * e)),
            Op::Log(x) => {
                self.accumulate(grads, *x, zip_map(g, self.value(*x), |gv, v| gv / v));
            }
            Op::Relu(x) => {
                self.accumulate(
                    grads,
                    *x,
                    zip_map(g, self.value(*x), |gv, v| if v > T::zero() { gv } else { T::zero() }),
                );
            }
            Op::SpatialSoftmax(x) => {
                let p = y.shape().plane();
                let mut dx = g.clone();
                for (dplane, yplane) in dx.data_mut().chunks_mut(p).zip(y.data().chunks(p)) {
                    let dot: T = dplane.iter().zip(yplane).map(|(&a, &b)| a * b).sum();
                    for (d, &s) in dplane.iter_mut().zip(yplane) {
                        *d = s * (*d - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GroupMax { x, group, argmax } => {
                let s = self.shape(*x);
                let os = y.shape();
                let p = s.plane();
                let mut dx = Tensor4::zeros(s);
                for n in 0..os.n {
                    for gi in 0..os.c {
                        for pos in 0..p {
                            let o = os.index(n, gi, 0, 0) + pos;
                            let m = argmax[o] as usize;
                            let src = s.index(n, gi * group + m, 0, 0) + pos;
                            dx.data_mut()[src] = dx.data()[src] + g.data()[o];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Narrow { x, start } => {
                let s = self.shape(*x);
                let os = y.shape();
                let mut dx = Tensor4::zeros(s);
                let span = os.item();
                for n in 0..s.n {
                    let dst = s.index(n, *start, 0, 0);
                    dx.data_mut()[dst..dst + span].copy_from_slice(&g.data()[n * span..(n + 1) * span]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(xs) => {
                let os = y.shape();
                let mut offset = 0;
                for &v in xs {
                    let s = self.shape(v);
                    let mut dx = Tensor4::zeros(s);
                    let span = s.item();
                    for n in 0..s.n {
                        let src = os.index(n, offset, 0, 0);
                        dx.data_mut()[n * span..(n + 1) * span].copy_from_slice(&g.data()[src..src + span]);
                    }
                    offset += s.c;
                    self.accumulate(grads, v, dx);
                }
            }
            Op::ChannelScale { x, scale } => {
                let c = scale.len();
                let mut dx = g.clone();
                for (i, plane) in dx.data_mut().chunks_mut(y.shape().plane()).enumerate() {
                    let k = scale[i % c];
                    plane.iter_mut().for_each(|v| *v = *v * k);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gap(x) | Op::SpatialSum(x) => {
                let s = self.shape(*x);
                let k = match node.op {
                    Op::Gap(_) => T::one() / T::from_f(s.plane() as f64),
                    _ => T::one(),
                };
                let mut dx = Tensor4::zeros(s);
                for (plane, &gv) in dx.data_mut().chunks_mut(s.plane()).zip(g.data()) {
                    plane.iter_mut().for_each(|v| *v = gv * k);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let s = self.shape(*x);
                self.accumulate(grads, *x, Tensor4::full(s, g.item()));
            }
            Op::Mean(x) => {
                let s = self.shape(*x);
                self.accumulate(grads, *x, Tensor4::full(s, g.item() / T::from_f(s.numel() as f64)));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let s = self.shape(*logits);
                let classes = s.item();
                let k = g.item() / T::from_f(s.n as f64);
                let mut d = probs.clone();
                for (n, &lab) in labels.iter().enumerate() {
                    d[n * classes + lab] = d[n * classes + lab] - T::one();
                }
                d.iter_mut().for_each(|v| *v = *v * k);
                self.accumulate(grads, *logits, Tensor4::from_vec(s, d).expect("ce grad shape"));
            }
            Op::Upsample { x, plan } => self.accumulate(grads, *x, plan.backward(g)),
            Op::Repeat { x, k } => {
                self.accumulate(grads, *x, resample::channel_repeat_backward(g, *k));
            }
            Op::Conv(saved) => nn::conv_backward(self, saved, g, grads),
            Op::BatchNorm(saved) => nn::batch_norm_backward(self, saved, g, grads),
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor4::zeros(self.shape(*x));
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    let src = src as usize;
                    dx.data_mut()[src] = dx.data()[src] + gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => nn::linear_backward(self, *x, *w, *b, g, grads),
        }
    }
}
