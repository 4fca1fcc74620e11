//! Differentiable primitive kernels: forward functions plus the backward
//! kernels the gradient tape calls.

mod conv;
pub(crate) mod gemm;
mod norm;

pub use conv::{conv2d, conv2d_backward};
pub use norm::{batch_norm, Mode, RunningStats, BN_EPS, BN_MOMENTUM};
pub(crate) use norm::{bn_eval_backward, bn_eval_forward, bn_train_backward, bn_train_forward, BnCache};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use gemm::gemm;

/// `input (rows, d_in) · weight (d_in, d_out) + bias`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, d_in) = input.dims2()?;
    let (w_in, d_out) = weight.dims2()?;
    if w_in != d_in {
        return Err(Error::shape("linear", input.shape(), weight.shape()));
    }
    let mut out = vec![T::zero(); rows * d_out];
    if let Some(b) = bias {
        if b.len() != d_out {
            return Err(Error::shape("linear bias", b.shape(), &[d_out]));
        }
        for row in out.chunks_mut(d_out) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(false, false, rows, d_out, d_in, T::one(), input.data(), weight.data(), T::one(), &mut out);
    Tensor::new(&[rows, d_out], out)
}

/// Row-wise softmax over the last axis, max-subtracted.
pub fn softmax<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let cols = *input.shape().last().unwrap_or(&1);
    let mut out = input.clone();
    for row in out.data_mut().chunks_mut(cols.max(1)) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = lane_max(row);
    for v in row.iter_mut() {
        *v -= max;
    }
    T::exp_in_place(row);
    let inv = T::one() / lane_dot(row, None);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Backward of a row softmax given its output `probs`: `p ⊙ (g − ⟨g, p⟩)`.
pub(crate) fn softmax_backward_rows<T: Scalar>(probs: &[T], grad: &[T], cols: usize, out: &mut [T]) {
    for ((p, g), o) in probs.chunks(cols).zip(grad.chunks(cols)).zip(out.chunks_mut(cols)) {
        let dot = lane_dot(p, Some(g));
        for ((o, &pi), &gi) in o.iter_mut().zip(p).zip(g) {
            *o = pi * (gi - dot);
        }
    }
}

const LANES: usize = 8;

/// `Σ a·b` (or `Σ a` without `b`) over eight independent accumulators, so
/// the reduction is not one serial dependency chain. The order is fixed.
fn lane_dot<T: Scalar>(a: &[T], b: Option<&[T]>) -> T {
    let mut acc = [T::zero(); LANES];
    let split = a.len() - a.len() % LANES;
    match b {
        Some(b) => {
            for (ca, cb) in a[..split].chunks_exact(LANES).zip(b[..split].chunks_exact(LANES)) {
                for i in 0..LANES {
                    acc[i] += ca[i] * cb[i];
                }
            }
            for (i, (&x, &y)) in a[split..].iter().zip(&b[split..]).enumerate() {
                acc[i] += x * y;
            }
        }
        None => {
            for ca in a[..split].chunks_exact(LANES) {
                for i in 0..LANES {
                    acc[i] += ca[i];
                }
            }
            for (i, &x) in a[split..].iter().enumerate() {
                acc[i] += x;
            }
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

fn lane_max<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::neg_infinity(); LANES];
    let split = a.len() - a.len() % LANES;
    for ca in a[..split].chunks_exact(LANES) {
        for i in 0..LANES {
            acc[i] = acc[i].max(ca[i]);
        }
    }
    for (i, &x) in a[split..].iter().enumerate() {
        acc[i] = acc[i].max(x);
    }
    acc.iter().fold(T::neg_infinity(), |m, &v| m.max(v))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// Adds `bias[c]` to every element of channel `c` of an `(N, C, H, W)` tensor.
pub fn add_channel_bias<T: Scalar>(input: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, h, w) = input.dims4()?;
    if bias.len() != c {
        return Err(Error::shape("channel bias", input.shape(), bias.shape()));
    }
    let mut out = input.clone();
    for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let b = bias.data()[i % c];
        plane.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

/// `(N, C, H, W) → (N, C)` spatial mean.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let inv = T::one() / T::from_usize_lossy(h * w);
    let data = input.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(&[n, c], data)
}

/// Mean softmax cross-entropy of `logits (N, classes)` against `labels`.
/// Returns the loss and the softmax probabilities.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, classes) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", logits.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Param(format!("label {bad} outside [0, {classes})")));
    }
    let probs = softmax(logits);
    let mut loss = T::zero();
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        loss += lse - row[l];
    }
    Ok((loss / T::from_usize_lossy(n), probs))
}

/// Mean of squared element-wise differences.
pub fn mean_squared_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::shape("l2_distance", a.shape(), b.shape()));
    }
    let total: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(total / T::from_usize_lossy(a.len().max(1)))
}
