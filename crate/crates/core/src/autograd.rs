//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape as copies of the tensors held by a [`ParamStore`]; calling
//! [`Tape::backward`] accumulates their gradients back into the store, so two
//! backward calls on the same tape add twice.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::error::{ensure_dim, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Classification target for [`Tape::cross_entropy`].
#[derive(Clone, Debug)]
pub enum Target<'a> {
    Labels(&'a [usize]),
    /// Row-major `[batch, classes]` distribution; rows must sum to one.
    Soft(&'a [f32]),
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnStatUpdate {
    pub target: BnStatTarget,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}

/// Where a batch norm's running statistics live in the parameter store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BnStatTarget {
    pub mean: ParamId,
    pub var: ParamId,
    /// Store channel for each normalized channel.
    pub channels: Vec<usize>,
}

/// Batch-norm operands. Running statistics are plain values: they never
/// receive gradients.
#[derive(Clone, Debug)]
pub struct BnInput {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub target: Option<BnStatTarget>,
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    LinComb(Vec<(Var, f32)>),
    AddConst(Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f32>),
    ChannelGate { x: Var, gate: Var },
    Relu(Var),
    Hswish(Var),
    Hsigmoid(Var),
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, inv_std: Vec<f32> },
    GlobalAvgPool(Var),
    MaxPool2 { x: Var, arg: Vec<u32> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Gather { x: Var, outer: usize, dim: usize, inner: usize, idx: Vec<usize> },
    CenterCrop { x: Var, from: usize, to: usize },
    Reshape(Var),
    SumAll(Var),
    CrossEntropy { logits: Var, grad_unit: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    train: bool,
    params_read: BTreeSet<ParamId>,
    bn_updates: Vec<BnStatUpdate>,
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Grads {
    grads: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    /// `train` selects batch statistics (and running-stat updates) for batch norm.
    pub fn new(train: bool) -> Self {
        Self {
            nodes: Vec::new(),
            train,
            params_read: BTreeSet::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters copied onto this tape so far.
    pub fn params_read(&self) -> &BTreeSet<ParamId> {
        &self.params_read
    }

    pub fn bn_updates(&self) -> &[BnStatUpdate] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnStatUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input (no gradient flows into anything upstream of it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that collects a gradient, for checking derivatives w.r.t. inputs.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.params_read.insert(id);
        let value = store.get(id).tensor.clone_value();
        self.push(value, Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (co, cig, kh, kw) = self.value(w).dims4()?;
        ensure_dim("conv kernel width", kh, kw)?;
        if groups == 0 || c % groups != 0 || co % groups != 0 {
            return Err(Error::Shape(format!(
                "groups {groups} must divide in channels {c} and out channels {co}"
            )));
        }
        ensure_dim("conv weight in_channels/groups", c / groups, cig)?;
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "kernel {kh} with padding {pad} does not fit input {h}x{wd}"
            )));
        }
        let geom = ConvGeom {
            n,
            c_in: c,
            h,
            w: wd,
            c_out: co,
            k: kh,
            stride,
            pad,
            groups,
        };
        let y = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let t = Tensor::new(vec![n, co, geom.h_out(), geom.w_out()], y)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(t, Op::Conv2d { x, w, geom }, ng))
    }

    /// `Σ coef_i · x_i` over same-shape operands.
    pub fn lin_comb(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Invalid("empty linear combination".into()))?;
        let shape = self.shape(first.0).to_vec();
        let mut out = vec![0.0f32; self.value(first.0).numel()];
        for &(v, c) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "cannot combine {:?} with {:?}",
                    self.shape(v),
                    shape
                )));
            }
            out.iter_mut()
                .zip(self.value(v).data())
                .for_each(|(o, x)| *o += c * x);
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(Tensor::new(shape, out)?, Op::LinComb(terms.to_vec()), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lin_comb(&[(a, 1.0), (b, 1.0)])
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        self.lin_comb(&[(a, c)])
    }

    pub fn add_const(&mut self, a: Var, c: f32) -> Var {
        let mut t = self.value(a).clone_value();
        t.data_mut().iter_mut().for_each(|x| *x += c);
        let ng = self.ng(a);
        self.push(t, Op::AddConst(a), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "elementwise product of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, a: Var, c: Vec<f32>) -> Result<Var> {
        ensure_dim("mul_const length", self.value(a).numel(), c.len())?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&c)
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::MulConst(a, c), ng))
    }

    /// `x[b,c,h,w] * gate[b,c]`.
    pub fn channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (gn, gc) = self.value(gate).dims2()?;
        ensure_dim("gate batch", n, gn)?;
        ensure_dim("gate channels", c, gc)?;
        let hw = h * w;
        let g = self.value(gate).data();
        let mut out = self.value(x).data().to_vec();
        out.chunks_mut(hw)
            .zip(g)
            .for_each(|(plane, &s)| plane.iter_mut().for_each(|v| *v *= s));
        let t = Tensor::new(vec![n, c, h, w], out)?;
        let ng = self.ng(x) || self.ng(gate);
        Ok(self.push(t, Op::ChannelGate { x, gate }, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn hswish(&mut self, a: Var) -> Var {
        self.unary(a, hswish, Op::Hswish(a))
    }

    pub fn hsigmoid(&mut self, a: Var) -> Var {
        self.unary(a, hsigmoid, Op::Hsigmoid(a))
    }

    pub fn batch_norm(&mut self, x: Var, bn: BnInput) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        ensure_dim("batch norm gamma", c, self.value(bn.gamma).numel())?;
        ensure_dim("batch norm beta", c, self.value(bn.beta).numel())?;
        ensure_dim("batch norm running mean", c, bn.running_mean.len())?;
        ensure_dim("batch norm running var", c, bn.running_var.len())?;
        let hw = h * w;
        let m = (n * hw) as f32;
        let xs = self.value(x).data();
        let gamma = self.value(bn.gamma).data();
        let beta = self.value(bn.beta).data();
        let ng = self.ng(x) || self.ng(bn.gamma) || self.ng(bn.beta);
        if self.train {
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for (ch, (mu, vr)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                let mut s = 0.0f64;
                for b in 0..n {
                    let p = &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    s += p.iter().map(|&v| v as f64).sum::<f64>();
                }
                let mu64 = s / m as f64;
                let mut ss = 0.0f64;
                for b in 0..n {
                    let p = &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    ss += p.iter().map(|&v| (v as f64 - mu64).powi(2)).sum::<f64>();
                }
                *mu = mu64 as f32;
                *vr = (ss / m as f64) as f32;
            }
            let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = vec![0.0f32; xs.len()];
            let mut out = vec![0.0f32; xs.len()];
            for b in 0..n {
                for ch in 0..c {
                    let o = (b * c + ch) * hw;
                    for i in o..o + hw {
                        xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
                        out[i] = gamma[ch] * xhat[i] + beta[ch];
                    }
                }
            }
            if let Some(target) = bn.target {
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                self.bn_updates.push(BnStatUpdate {
                    target,
                    batch_mean: mean,
                    batch_var: var.iter().map(|v| v * unbias).collect(),
                });
            }
            let t = Tensor::new(vec![n, c, h, w], out)?;
            Ok(self.push(
                t,
                Op::BatchNormTrain {
                    x,
                    gamma: bn.gamma,
                    beta: bn.beta,
                    xhat,
                    inv_std,
                },
                ng,
            ))
        } else {
            let inv_std: Vec<f32> = bn
                .running_var
                .iter()
                .map(|v| 1.0 / (v + BN_EPS).sqrt())
                .collect();
            let mut out = vec![0.0f32; xs.len()];
            for b in 0..n {
                for ch in 0..c {
                    let o = (b * c + ch) * hw;
                    let (mu, is, g, be) = (bn.running_mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                    for i in o..o + hw {
                        out[i] = g * ((xs[i] - mu) * is) + be;
                    }
                }
            }
            let t = Tensor::new(vec![n, c, h, w], out)?;
            Ok(self.push(
                t,
                Op::BatchNormEval {
                    x,
                    gamma: bn.gamma,
                    beta: bn.beta,
                    mean: bn.running_mean,
                    inv_std,
                },
                ng,
            ))
        }
    }

    /// `[b,c,h,w] -> [b,c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f32>() / hw as f32)
            .collect();
        let t = Tensor::new(vec![n, c], data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::GlobalAvgPool(x), ng))
    }

    /// 2×2 max pooling with stride 2, ceil mode: output `ceil(h/2) × ceil(w/2)`,
    /// matching a padded stride-2 convolution.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (y, arg) = kernels::maxpool2_forward(self.value(x).data(), n, c, h, w);
        let t = Tensor::new(vec![n, c, h.div_ceil(2), w.div_ceil(2)], y)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::MaxPool2 { x, arg }, ng))
    }

    /// `x[b,i] · w[o,i]ᵀ (+ bias[o])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = self.value(x).dims2()?;
        let (o, wi) = self.value(w).dims2()?;
        ensure_dim("linear in_features", i, wi)?;
        let mut y = kernels::matmul(n, i, o, self.value(x).data(), false, self.value(w).data(), true);
        if let Some(b) = b {
            ensure_dim("linear bias", o, self.value(b).numel())?;
            let bias = self.value(b).data();
            y.chunks_mut(o)
                .for_each(|row| row.iter_mut().zip(bias).for_each(|(v, bb)| *v += bb));
        }
        let t = Tensor::new(vec![n, o], y)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(t, Op::Linear { x, w, b }, ng))
    }

    /// Selects `indices` along `axis` (index_select).
    pub fn gather(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let dim = shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
            return Err(Error::Dimension {
                axis: "gather index",
                expected: dim,
                actual: bad,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * dim + i) * inner;
                out.extend_from_slice(&src[s..s + inner]);
            }
        }
        let mut new_shape = shape.clone();
        new_shape[axis] = indices.len();
        let t = Tensor::new(new_shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(
            t,
            Op::Gather {
                x,
                outer,
                dim,
                inner,
                idx: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Central `to×to` window of the trailing two (square) axes.
    pub fn center_crop(&mut self, x: Var, to: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(Error::Shape(format!("center crop needs square trailing axes, got {shape:?}")));
        }
        let from = shape[r - 1];
        if to > from || !(from - to).is_multiple_of(2) {
            return Err(Error::Shape(format!("cannot center-crop {from} to {to}")));
        }
        let off = (from - to) / 2;
        let planes: usize = shape[..r - 2].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * to * to);
        for p in 0..planes {
            for y in 0..to {
                let s = p * from * from + (y + off) * from + off;
                out.extend_from_slice(&src[s..s + to]);
            }
        }
        let mut new_shape = shape.clone();
        new_shape[r - 2] = to;
        new_shape[r - 1] = to;
        let t = Tensor::new(new_shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::CenterCrop { x, from, to }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone_value().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s as f32), Op::SumAll(x), ng)
    }

    /// Mean over the batch of `-Σ target · log softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, target: Target<'_>) -> Result<Var> {
        let (n, c) = self.value(logits).dims2()?;
        let z = self.value(logits).data();
        let logp = log_softmax_rows(z, c);
        let mut loss = 0.0f64;
        let mut grad = vec![0.0f32; n * c];
        match target {
            Target::Labels(labels) => {
                ensure_dim("labels", n, labels.len())?;
                for (b, &l) in labels.iter().enumerate() {
                    if l >= c {
                        return Err(Error::LabelOutOfRange {
                            label: l,
                            n_classes: c,
                        });
                    }
                    loss -= logp[b * c + l] as f64;
                    for j in 0..c {
                        grad[b * c + j] = logp[b * c + j].exp() - if j == l { 1.0 } else { 0.0 };
                    }
                }
            }
            Target::Soft(t) => {
                ensure_dim("soft targets", n * c, t.len())?;
                for b in 0..n {
                    let row = &t[b * c..(b + 1) * c];
                    let s: f32 = row.iter().sum();
                    if (s - 1.0).abs() > 1e-5 {
                        return Err(Error::Invalid(format!(
                            "soft target row {b} sums to {s}, expected 1"
                        )));
                    }
                    for j in 0..c {
                        let lp = logp[b * c + j];
                        loss -= (row[j] * lp) as f64;
                        grad[b * c + j] = lp.exp() * s - row[j];
                    }
                }
            }
        }
        grad.iter_mut().for_each(|g| *g /= n as f32);
        let t = Tensor::scalar((loss / n as f64) as f32);
        let ng = self.ng(logits);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                grad_unit: grad,
            },
            ng,
        ))
    }

    /// Gradients of scalar `loss` w.r.t. every leaf that requires them.
    pub fn grads(&self, loss: Var) -> Result<Grads> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf | Op::Param(_));
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    /// Accumulates parameter gradients of `loss` into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.grads(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[i] {
                    store.get_mut(id).tensor.accumulate_grad(g);
                } else {
                    let zeros = vec![0.0; node.value.numel()];
                    store.get_mut(id).tensor.accumulate_grad(&zeros);
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[i];
        let send = |v: Var, delta: Vec<f32>, grads: &mut [Option<Vec<f32>>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                );
                send(*x, dx, grads);
                send(*w, dw, grads);
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    send(v, g.iter().map(|d| d * c).collect(), grads);
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => send(*a, g.to_vec(), grads),
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                send(*a, g.iter().zip(bv).map(|(d, y)| d * y).collect(), grads);
                send(*b, g.iter().zip(av).map(|(d, x)| d * x).collect(), grads);
            }
            Op::MulConst(a, c) => send(*a, g.iter().zip(c).map(|(d, y)| d * y).collect(), grads),
            Op::ChannelGate { x, gate } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gate).data();
                let hw = xv.len() / gv.len();
                let dx = g
                    .chunks(hw)
                    .zip(gv)
                    .flat_map(|(d, &s)| d.iter().map(move |v| v * s))
                    .collect();
                let dgate = g
                    .chunks(hw)
                    .zip(xv.chunks(hw))
                    .map(|(d, xp)| d.iter().zip(xp).map(|(a, b)| a * b).sum::<f32>())
                    .collect();
                send(*x, dx, grads);
                send(*gate, dgate, grads);
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                send(*a, g.iter().zip(xv).map(|(d, &x)| if x > 0.0 { *d } else { 0.0 }).collect(), grads);
            }
            Op::Hswish(a) => {
                let xv = self.value(*a).data();
                send(*a, g.iter().zip(xv).map(|(d, &x)| d * hswish_grad(x)).collect(), grads);
            }
            Op::Hsigmoid(a) => {
                let xv = self.value(*a).data();
                let dg = g
                    .iter()
                    .zip(xv)
                    .map(|(d, &x)| if x > -3.0 && x < 3.0 { d / 6.0 } else { 0.0 })
                    .collect();
                send(*a, dg, grads);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let m = (n * hw) as f32;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * hw;
                        for j in o..o + hw {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                let mut dx = vec![0.0f32; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * hw;
                        let k = gam[ch] * inv_std[ch] / m;
                        for j in o..o + hw {
                            dx[j] = k * (m * g[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
                        }
                    }
                }
                send(*x, dx, grads);
                send(*gamma, dgamma, grads);
                send(*beta, dbeta, grads);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                let mut dx = vec![0.0f32; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * hw;
                        for j in o..o + hw {
                            dgamma[ch] += g[j] * (xv[j] - mean[ch]) * inv_std[ch];
                            dbeta[ch] += g[j];
                            dx[j] = g[j] * gam[ch] * inv_std[ch];
                        }
                    }
                }
                send(*x, dx, grads);
                send(*gamma, dgamma, grads);
                send(*beta, dbeta, grads);
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = 1.0 / hw as f32;
                let dx = g.iter().flat_map(|&d| std::iter::repeat_n(d * inv, hw)).collect();
                send(*x, dx, grads);
            }
            Op::MaxPool2 { x, arg } => {
                let mut dx = vec![0.0f32; self.value(*x).numel()];
                for (d, &a) in g.iter().zip(arg) {
                    dx[a as usize] += d;
                }
                send(*x, dx, grads);
            }
            Op::Linear { x, w, b } => {
                let (n, i) = self.value(*x).dims2()?;
                let (o, _) = self.value(*w).dims2()?;
                if self.nodes[x.0].needs_grad {
                    let dx = kernels::matmul(n, o, i, g, false, self.value(*w).data(), false);
                    send(*x, dx, grads);
                }
                if self.nodes[w.0].needs_grad {
                    let dw = kernels::matmul(o, n, i, g, true, self.value(*x).data(), false);
                    send(*w, dw, grads);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0f32; o];
                    g.chunks(o)
                        .for_each(|row| db.iter_mut().zip(row).for_each(|(a, d)| *a += d));
                    send(*b, db, grads);
                }
            }
            Op::Gather {
                x,
                outer,
                dim,
                inner,
                idx,
            } => {
                let mut dx = vec![0.0f32; outer * dim * inner];
                let k = idx.len();
                for o in 0..*outer {
                    for (j, &src) in idx.iter().enumerate() {
                        let s = (o * k + j) * inner;
                        let d = (o * dim + src) * inner;
                        dx[d..d + inner]
                            .iter_mut()
                            .zip(&g[s..s + inner])
                            .for_each(|(a, b)| *a += b);
                    }
                }
                send(*x, dx, grads);
            }
            Op::CenterCrop { x, from, to } => {
                let off = (from - to) / 2;
                let planes = g.len() / (to * to);
                let mut dx = vec![0.0f32; planes * from * from];
                for p in 0..planes {
                    for y in 0..*to {
                        let d = p * from * from + (y + off) * from + off;
                        let s = p * to * to + y * to;
                        dx[d..d + to].copy_from_slice(&g[s..s + to]);
                    }
                }
                send(*x, dx, grads);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0]; n], grads);
            }
            Op::CrossEntropy { logits, grad_unit } => {
                send(*logits, grad_unit.iter().map(|v| v * g[0]).collect(), grads);
            }
        }
        Ok(())
    }
}

impl Tensor {
    /// Copy of shape and data without the gradient buffer.
    pub fn clone_value(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.data().to_vec()).expect("valid tensor")
    }
}

#[inline]
pub fn hswish(x: f32) -> f32 {
    x * (x + 3.0).clamp(0.0, 6.0) / 6.0
}

#[inline]
fn hswish_grad(x: f32) -> f32 {
    if x <= -3.0 {
        0.0
    } else if x >= 3.0 {
        1.0
    } else {
        (2.0 * x + 3.0) / 6.0
    }
}

#[inline]
pub fn hsigmoid(x: f32) -> f32 {
    (x + 3.0).clamp(0.0, 6.0) / 6.0
}

pub fn log_softmax_rows(z: &[f32], c: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; z.len()];
    for (row, o) in z.chunks(c).zip(out.chunks_mut(c)) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = row.iter().map(|&v| ((v - m) as f64).exp()).sum::<f64>().ln() as f32 + m;
        o.iter_mut().zip(row).for_each(|(a, &v)| *a = v - lse);
    }
    out
}

/// Row-wise softmax of a row-major `[n, c]` matrix.
pub fn softmax_rows(z: &[f32], c: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; z.len()];
    out.par_chunks_mut(c).zip(z.par_chunks(c)).for_each(|(o, row)| {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0f64;
        for (a, &v) in o.iter_mut().zip(row) {
            *a = (v - m).exp();
            s += *a as f64;
        }
        let inv = (1.0 / s) as f32;
        o.iter_mut().for_each(|a| *a *= inv);
    });
    out
}
