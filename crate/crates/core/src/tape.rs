//! Reverse-mode gradient tape over the fixed primitive set.
//!
//! Every primitive call evaluates eagerly and appends a node. `backward`
//! replays the nodes in reverse, producing one gradient per leaf that was
//! registered as trainable. A tape is single-writer: build one per forward
//! pass.

use std::collections::HashMap;

use crate::attention::{
    cross_attention_backward, cross_attention_forward, local_attention_backward, local_attention_forward,
    CrossAttnParams, LocalAttnParams,
};
use crate::error::{Error, Result};
use crate::fam::{apply_global_filter, global_filter_backward};
use crate::ops::gemm::gemm;
use crate::ops::{
    self, bn_eval_backward, bn_eval_forward, bn_train_backward, bn_train_forward, softmax_backward_rows, BnCache,
    RunningStats,
};
use crate::scalar::Scalar;
use crate::spectral::{fft2, fft2_complex, ifft2, ifft2_unnormalized, HpfMask};
use crate::tensor::{ComplexTensor, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
pub enum Value<T> {
    Real(Tensor<T>),
    Complex(ComplexTensor<T>),
}

impl<T: Scalar> Value<T> {
    fn shape(&self) -> &[usize] {
        match self {
            Value::Real(t) => t.shape(),
            Value::Complex(z) => z.shape(),
        }
    }

    fn accumulate(&mut self, other: Value<T>) {
        match (self, other) {
            (Value::Real(a), Value::Real(b)) => a.add_assign(&b),
            (Value::Complex(a), Value::Complex(b)) => a.add_assign(&b),
            _ => unreachable!("gradient kind always matches the node kind"),
        }
    }
}

/// Primitive kinds, for invocation counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    ChannelBias,
    Linear,
    Add,
    Relu,
    BatchNormTrain,
    BatchNormEval,
    GlobalAvgPool,
    Softmax,
    CrossEntropy,
    Fft2,
    Ifft2,
    RealPart,
    ComplexFrom,
    GlobalFilter,
    HighPass,
    Scale,
    ScaleConst,
    MeanSquaredError,
    Sum,
    Dot,
    LocalAttention,
    CrossAttention,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ChannelBias { x: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Relu { x: Var },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, cache: BnCache<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, stats: RunningStats<T> },
    GlobalAvgPool { x: Var },
    Softmax { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
    Fft2 { x: Var },
    Ifft2 { z: Var },
    RealPart { z: Var },
    ComplexFrom { re: Var, im: Var },
    GlobalFilter { z: Var, k: Var },
    HighPass { z: Var, mask: HpfMask },
    Scale { x: Var, s: Var },
    ScaleConst { x: Var, c: T },
    MeanSquaredError { a: Var, b: Var },
    Sum { terms: Vec<Var> },
    Dot { x: Var, weights: Tensor<T> },
    LocalAttention { x: Var, wq: Var, wk: Var, wv: Var, rel: Var, window: usize },
    CrossAttention { low: Var, high: Var, wq: Var, wk: Var, wv: Var, scaled: bool },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ChannelBias { .. } => OpKind::ChannelBias,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add { .. } => OpKind::Add,
            Op::Relu { .. } => OpKind::Relu,
            Op::BatchNormTrain { .. } => OpKind::BatchNormTrain,
            Op::BatchNormEval { .. } => OpKind::BatchNormEval,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Fft2 { .. } => OpKind::Fft2,
            Op::Ifft2 { .. } => OpKind::Ifft2,
            Op::RealPart { .. } => OpKind::RealPart,
            Op::ComplexFrom { .. } => OpKind::ComplexFrom,
            Op::GlobalFilter { .. } => OpKind::GlobalFilter,
            Op::HighPass { .. } => OpKind::HighPass,
            Op::Scale { .. } => OpKind::Scale,
            Op::ScaleConst { .. } => OpKind::ScaleConst,
            Op::MeanSquaredError { .. } => OpKind::MeanSquaredError,
            Op::Sum { .. } => OpKind::Sum,
            Op::Dot { .. } => OpKind::Dot,
            Op::LocalAttention { .. } => OpKind::LocalAttention,
            Op::CrossAttention { .. } => OpKind::CrossAttention,
        }
    }
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    names: HashMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Batch statistics produced by a train-mode batch norm, for the caller to
/// fold into its running statistics.
#[derive(Clone, Debug)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            names: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Real(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Unnamed trainable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Real(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named trainable leaf; its gradient is retrievable with
    /// [`Gradients::named`].
    pub fn param(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<Var> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(Error::Param(format!("parameter `{name}` registered twice on one tape")));
        }
        let v = self.leaf(t);
        self.names.insert(name, v);
        Ok(v)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// Real value of a node. Panics if the node is complex.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Real(t) => t,
            Value::Complex(_) => panic!("node {} holds a complex value", v.0),
        }
    }

    /// Complex value of a node. Panics if the node is real.
    pub fn complex_value(&self, v: Var) -> &ComplexTensor<T> {
        match &self.nodes[v.0].value {
            Value::Complex(z) => z,
            Value::Real(_) => panic!("node {} holds a real value", v.0),
        }
    }

    fn expect_real(&self, v: Var, op: &'static str) -> Result<&Tensor<T>> {
        match &self.nodes[v.0].value {
            Value::Real(t) => Ok(t),
            Value::Complex(z) => Err(Error::shape(op, z.shape(), &[])),
        }
    }

    fn expect_complex(&self, v: Var, op: &'static str) -> Result<&ComplexTensor<T>> {
        match &self.nodes[v.0].value {
            Value::Complex(z) => Ok(z),
            Value::Real(t) => Err(Error::shape(op, t.shape(), &[])),
        }
    }

    /// Number of recorded nodes of the given kind.
    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::conv2d(self.expect_real(x, "conv2d")?, self.expect_real(w, "conv2d")?, stride, pad)?;
        Ok(self.push(Value::Real(out), Op::Conv2d { x, w, stride, pad }, &[x, w]))
    }

    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = ops::add_channel_bias(self.expect_real(x, "channel_bias")?, self.expect_real(b, "channel_bias")?)?;
        Ok(self.push(Value::Real(out), Op::ChannelBias { x, b }, &[x, b]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bias = match b {
            Some(b) => Some(self.expect_real(b, "linear")?),
            None => None,
        };
        let out = ops::linear(self.expect_real(x, "linear")?, self.expect_real(w, "linear")?, bias)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Value::Real(out), Op::Linear { x, w, b }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.expect_real(a, "add")?.add(self.expect_real(b, "add")?)?;
        Ok(self.push(Value::Real(out), Op::Add { a, b }, &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu(self.expect_real(x, "relu")?);
        Ok(self.push(Value::Real(out), Op::Relu { x }, &[x]))
    }

    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BnBatchStats<T>)> {
        let (out, cache) = bn_train_forward(
            self.expect_real(x, "batch_norm")?,
            self.expect_real(gamma, "batch_norm")?,
            self.expect_real(beta, "batch_norm")?,
        )?;
        let stats = BnBatchStats {
            mean: cache.mean.clone(),
            var_unbiased: cache.var_unbiased.clone(),
        };
        let v = self.push(Value::Real(out), Op::BatchNormTrain { x, gamma, beta, cache }, &[x, gamma, beta]);
        Ok((v, stats))
    }

    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, stats: &RunningStats<T>) -> Result<Var> {
        let out = bn_eval_forward(
            self.expect_real(x, "batch_norm")?,
            self.expect_real(gamma, "batch_norm")?,
            self.expect_real(beta, "batch_norm")?,
            stats,
        )?;
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            stats: stats.clone(),
        };
        Ok(self.push(Value::Real(out), op, &[x, gamma, beta]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.expect_real(x, "global_avg_pool")?)?;
        Ok(self.push(Value::Real(out), Op::GlobalAvgPool { x }, &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax(self.expect_real(x, "softmax")?);
        Ok(self.push(Value::Real(out), Op::Softmax { x }, &[x]))
    }

    /// Mean softmax cross-entropy; a `[1]`-shaped scalar node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.expect_real(logits, "cross_entropy")?, labels)?;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Value::Real(Tensor::scalar(loss)), op, &[logits]))
    }

    pub fn fft2(&mut self, x: Var) -> Result<Var> {
        let out = fft2(self.expect_real(x, "fft2")?)?;
        Ok(self.push(Value::Complex(out), Op::Fft2 { x }, &[x]))
    }

    pub fn ifft2(&mut self, z: Var) -> Result<Var> {
        let out = ifft2(self.expect_complex(z, "ifft2")?)?;
        Ok(self.push(Value::Complex(out), Op::Ifft2 { z }, &[z]))
    }

    pub fn real_part(&mut self, z: Var) -> Result<Var> {
        let out = self.expect_complex(z, "real_part")?.re();
        Ok(self.push(Value::Real(out), Op::RealPart { z }, &[z]))
    }

    pub fn complex(&mut self, re: Var, im: Var) -> Result<Var> {
        let out = ComplexTensor::from_parts(self.expect_real(re, "complex")?, self.expect_real(im, "complex")?)?;
        Ok(self.push(Value::Complex(out), Op::ComplexFrom { re, im }, &[re, im]))
    }

    pub fn global_filter(&mut self, z: Var, k: Var) -> Result<Var> {
        let out = apply_global_filter(self.expect_complex(z, "global_filter")?, self.expect_complex(k, "global_filter")?)?;
        Ok(self.push(Value::Complex(out), Op::GlobalFilter { z, k }, &[z, k]))
    }

    pub fn high_pass(&mut self, z: Var, mask: &HpfMask) -> Result<Var> {
        let out = mask.apply(self.expect_complex(z, "high_pass")?)?;
        Ok(self.push(Value::Complex(out), Op::HighPass { z, mask: mask.clone() }, &[z]))
    }

    /// `x · s` for a one-element node `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let st = self.expect_real(s, "scale")?;
        if st.len() != 1 {
            return Err(Error::shape("scale", st.shape(), &[1]));
        }
        let factor = st.data()[0];
        let out = self.expect_real(x, "scale")?.scale(factor);
        Ok(self.push(Value::Real(out), Op::Scale { x, s }, &[x, s]))
    }

    pub fn scale_const(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.expect_real(x, "scale_const")?.scale(c);
        Ok(self.push(Value::Real(out), Op::ScaleConst { x, c }, &[x]))
    }

    /// Mean of squared differences; a `[1]`-shaped scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = ops::mean_squared_error(self.expect_real(a, "l2_distance")?, self.expect_real(b, "l2_distance")?)?;
        Ok(self.push(Value::Real(Tensor::scalar(d)), Op::MeanSquaredError { a, b }, &[a, b]))
    }

    /// Sum of one-element nodes, accumulated in the given order.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let mut total = T::zero();
        for &t in terms {
            let v = self.expect_real(t, "sum")?;
            if v.len() != 1 {
                return Err(Error::shape("sum", v.shape(), &[1]));
            }
            total += v.data()[0];
        }
        Ok(self.push(Value::Real(Tensor::scalar(total)), Op::Sum { terms: terms.to_vec() }, terms))
    }

    /// `Σ x ⊙ weights`, the scalar projection used by gradient checks.
    pub fn dot(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let xv = self.expect_real(x, "dot")?;
        if xv.shape() != weights.shape() {
            return Err(Error::shape("dot", xv.shape(), weights.shape()));
        }
        let total: T = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let op = Op::Dot {
            x,
            weights: weights.clone(),
        };
        Ok(self.push(Value::Real(Tensor::scalar(total)), op, &[x]))
    }

    pub fn local_attention(&mut self, x: Var, wq: Var, wk: Var, wv: Var, rel: Var, window: usize) -> Result<Var> {
        let params = LocalAttnParams::from_parts(
            window,
            self.expect_real(wq, "local_attention")?.clone(),
            self.expect_real(wk, "local_attention")?.clone(),
            self.expect_real(wv, "local_attention")?.clone(),
            self.expect_real(rel, "local_attention")?.clone(),
        )?;
        let out = local_attention_forward(self.expect_real(x, "local_attention")?, &params)?;
        let op = Op::LocalAttention {
            x,
            wq,
            wk,
            wv,
            rel,
            window,
        };
        Ok(self.push(Value::Real(out), op, &[x, wq, wk, wv, rel]))
    }

    pub fn cross_attention(&mut self, low: Var, high: Var, wq: Var, wk: Var, wv: Var, scaled: bool) -> Result<Var> {
        let params = self.cross_params(wq, wk, wv, scaled)?;
        let out = cross_attention_forward(
            self.expect_real(low, "cross_attention")?,
            self.expect_real(high, "cross_attention")?,
            &params,
        )?;
        let op = Op::CrossAttention {
            low,
            high,
            wq,
            wk,
            wv,
            scaled,
        };
        Ok(self.push(Value::Real(out), op, &[low, high, wq, wk, wv]))
    }

    fn cross_params(&self, wq: Var, wk: Var, wv: Var, scaled: bool) -> Result<CrossAttnParams<T>> {
        CrossAttnParams::from_parts(
            self.expect_real(wq, "cross_attention")?.clone(),
            self.expect_real(wk, "cross_attention")?.clone(),
            self.expect_real(wv, "cross_attention")?.clone(),
            scaled,
        )
    }

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let seed = self.expect_real(loss, "backward")?;
        if seed.len() != 1 {
            return Err(Error::shape("backward", seed.shape(), &[1]));
        }
        let mut grads: Vec<Option<Value<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Value::Real(Tensor::ones(seed.shape())));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut sink = Sink {
                tape: self,
                grads: &mut grads,
            };
            self.backprop(i, g, &mut sink)?;
        }
        Ok(Gradients {
            grads,
            names: self.names.clone(),
        })
    }

    fn backprop(&self, i: usize, g: Value<T>, sink: &mut Sink<'_, T>) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, stride, pad } => {
                let g = real(g);
                let (dx, dw) = ops::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &g,
                    *stride,
                    *pad,
                    self.rg(*x),
                    self.rg(*w),
                )?;
                sink.real_opt(*x, dx);
                sink.real_opt(*w, dw);
            }
            Op::ChannelBias { x, b } => {
                let g = real(g);
                if self.rg(*b) {
                    let (_, c, h, w) = g.dims4()?;
                    let mut db = vec![T::zero(); c];
                    for (k, p) in g.data().chunks(h * w).enumerate() {
                        db[k % c] += p.iter().copied().sum::<T>();
                    }
                    sink.real(*b, Tensor::new(self.value(*b).shape(), db)?);
                }
                sink.real(*x, g);
            }
            Op::Linear { x, w, b } => {
                let g = real(g);
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (rows, d_in) = xv.dims2()?;
                let d_out = wv.shape()[1];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); rows * d_in];
                    gemm(false, true, rows, d_in, d_out, T::one(), g.data(), wv.data(), T::zero(), &mut dx);
                    sink.real(*x, Tensor::new(xv.shape(), dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); d_in * d_out];
                    gemm(true, false, d_in, d_out, rows, T::one(), xv.data(), g.data(), T::zero(), &mut dw);
                    sink.real(*w, Tensor::new(wv.shape(), dw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); d_out];
                        for row in g.data().chunks(d_out) {
                            for (a, &v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        sink.real(*b, Tensor::new(self.value(*b).shape(), db)?);
                    }
                }
            }
            Op::Add { a, b } => {
                let g = real(g);
                if self.rg(*a) {
                    sink.real(*b, g.clone());
                    sink.real(*a, g);
                } else {
                    sink.real(*b, g);
                }
            }
            Op::Relu { x } => {
                let out = self.value(Var(i));
                let dx = real(g).zip_map(out, |gv, o| if o > T::zero() { gv } else { T::zero() })?;
                sink.real(*x, dx);
            }
            Op::BatchNormTrain { x, gamma, beta, cache } => {
                let (dx, dgamma, dbeta) = bn_train_backward(&real(g), self.value(*gamma), cache);
                sink.real(*x, dx);
                sink.real(*gamma, dgamma);
                sink.real(*beta, dbeta);
            }
            Op::BatchNormEval { x, gamma, beta, stats } => {
                let (dx, dgamma, dbeta) = bn_eval_backward(self.value(*x), &real(g), self.value(*gamma), stats);
                sink.real(*x, dx);
                sink.real(*gamma, dgamma);
                sink.real(*beta, dbeta);
            }
            Op::GlobalAvgPool { x } => {
                let g = real(g);
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4()?;
                let inv = T::one() / T::from_usize_lossy(h * w);
                let mut dx = Tensor::zeros(xv.shape());
                for (p, &gv) in dx.data_mut().chunks_mut(h * w).zip(g.data()) {
                    p.fill(gv * inv);
                }
                sink.real(*x, dx);
            }
            Op::Softmax { x } => {
                let g = real(g);
                let out = self.value(Var(i));
                let cols = *out.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); out.len()];
                softmax_backward_rows(out.data(), g.data(), cols.max(1), &mut dx);
                sink.real(*x, Tensor::new(out.shape(), dx)?);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let g0 = real(g).data()[0];
                let (n, classes) = probs.dims2()?;
                let k = g0 / T::from_usize_lossy(n);
                let mut dx = probs.scale(k);
                for (r, &l) in labels.iter().enumerate() {
                    dx.data_mut()[r * classes + l] = dx.data_mut()[r * classes + l] - k;
                }
                sink.real(*logits, dx);
            }
            Op::Fft2 { x } => {
                // The adjoint of the unnormalized forward transform is the
                // unnormalized inverse; a real input keeps the real part.
                let dz = ifft2_unnormalized(&complex(g))?;
                sink.real(*x, dz.re());
            }
            Op::Ifft2 { z } => {
                let g = complex(g);
                let (_, _, h, w) = g.dims4()?;
                let inv = T::one() / T::from_usize_lossy(h * w);
                let mut dz = fft2_complex(&g)?;
                dz.data_mut().iter_mut().for_each(|v| *v = v.scale(inv));
                sink.complex(*z, dz);
            }
            Op::RealPart { z } => {
                sink.complex(*z, ComplexTensor::from_real(&real(g)));
            }
            Op::ComplexFrom { re, im } => {
                let g = complex(g);
                sink.real(*re, g.re());
                sink.real(*im, g.im());
            }
            Op::GlobalFilter { z, k } => {
                let (dz, dk) = global_filter_backward(
                    self.complex_value(*z),
                    self.complex_value(*k),
                    &complex(g),
                    self.rg(*z),
                    self.rg(*k),
                );
                if let Some(dz) = dz {
                    sink.complex(*z, dz);
                }
                if let Some(dk) = dk {
                    sink.complex(*k, dk);
                }
            }
            Op::HighPass { z, mask } => {
                sink.complex(*z, mask.apply(&complex(g))?);
            }
            Op::Scale { x, s } => {
                let g = real(g);
                let sv = self.value(*s);
                if self.rg(*s) {
                    let ds: T = g.data().iter().zip(self.value(*x).data()).map(|(&a, &b)| a * b).sum();
                    sink.real(*s, Tensor::new(sv.shape(), vec![ds])?);
                }
                sink.real(*x, g.scale(sv.data()[0]));
            }
            Op::ScaleConst { x, c } => {
                sink.real(*x, real(g).scale(*c));
            }
            Op::MeanSquaredError { a, b } => {
                let g0 = real(g).data()[0];
                let av = self.value(*a);
                let k = (T::one() + T::one()) * g0 / T::from_usize_lossy(av.len().max(1));
                let da = av.zip_map(self.value(*b), |x, y| k * (x - y))?;
                if self.rg(*b) {
                    sink.real(*b, da.map(|v| -v));
                }
                sink.real(*a, da);
            }
            Op::Sum { terms } => {
                let g = real(g);
                for &t in terms {
                    sink.real(t, g.clone());
                }
            }
            Op::Dot { x, weights } => {
                let g0 = real(g).data()[0];
                sink.real(*x, weights.scale(g0));
            }
            Op::LocalAttention {
                x,
                wq,
                wk,
                wv,
                rel,
                window,
            } => {
                let params = LocalAttnParams::from_parts(
                    *window,
                    self.value(*wq).clone(),
                    self.value(*wk).clone(),
                    self.value(*wv).clone(),
                    self.value(*rel).clone(),
                )?;
                let grads = local_attention_backward(self.value(*x), &params, &real(g))?;
                sink.real(*x, grads.x);
                sink.real(*wq, grads.wq);
                sink.real(*wk, grads.wk);
                sink.real(*wv, grads.wv);
                sink.real(*rel, grads.rel);
            }
            Op::CrossAttention {
                low,
                high,
                wq,
                wk,
                wv,
                scaled,
            } => {
                let params = self.cross_params(*wq, *wk, *wv, *scaled)?;
                let grads =
                    cross_attention_backward(self.value(*low), self.value(*high), &params, &real(g))?;
                sink.real(*low, grads.low);
                sink.real(*high, grads.high);
                sink.real(*wq, grads.wq);
                sink.real(*wk, grads.wk);
                sink.real(*wv, grads.wv);
            }
        }
        Ok(())
    }
}

fn real<T>(v: Value<T>) -> Tensor<T> {
    match v {
        Value::Real(t) => t,
        Value::Complex(_) => unreachable!("real node received a complex gradient"),
    }
}

fn complex<T>(v: Value<T>) -> ComplexTensor<T> {
    match v {
        Value::Complex(z) => z,
        Value::Real(_) => unreachable!("complex node received a real gradient"),
    }
}

/// Accumulates input gradients, skipping inputs that need none.
struct Sink<'a, T> {
    tape: &'a Tape<T>,
    grads: &'a mut Vec<Option<Value<T>>>,
}

impl<T: Scalar> Sink<'_, T> {
    fn push(&mut self, v: Var, g: Value<T>) {
        if !self.tape.rg(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.tape.nodes[v.0].value.shape());
        match &mut self.grads[v.0] {
            Some(existing) => existing.accumulate(g),
            slot => *slot = Some(g),
        }
    }

    fn real(&mut self, v: Var, g: Tensor<T>) {
        self.push(v, Value::Real(g));
    }

    fn real_opt(&mut self, v: Var, g: Option<Tensor<T>>) {
        if let Some(g) = g {
            self.real(v, g);
        }
    }

    fn complex(&mut self, v: Var, g: ComplexTensor<T>) {
        self.push(v, Value::Complex(g));
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Value<T>>>,
    names: HashMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a real leaf, `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        match self.grads.get(v.0)? {
            Some(Value::Real(t)) => Some(t),
            _ => None,
        }
    }

    pub fn get_complex(&self, v: Var) -> Option<&ComplexTensor<T>> {
        match self.grads.get(v.0)? {
            Some(Value::Complex(z)) => Some(z),
            _ => None,
        }
    }

    /// Gradient of the parameter registered under `name`.
    pub fn named(&self, name: &str) -> Option<&Tensor<T>> {
        self.get(*self.names.get(name)?)
    }

    /// Names of every registered parameter.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }
}
