use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the previous running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// Blend in one batch's mean and (unbiased) variance.
    pub fn update(&mut self, batch_mean: &[T], batch_var_unbiased: &[T]) {
        let keep = T::from_f64_lossy(BN_MOMENTUM);
        let take = T::one() - keep;
        for (r, &m) in self.mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + take * m;
        }
        for (r, &v) in self.var.iter_mut().zip(batch_var_unbiased) {
            *r = keep * *r + take * v;
        }
    }
}

pub(crate) struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

fn check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.len() != c {
        return Err(Error::shape("batch_norm gamma", x.shape(), gamma.shape()));
    }
    if beta.len() != c {
        return Err(Error::shape("batch_norm beta", x.shape(), beta.shape()));
    }
    Ok((n, c, h * w))
}

pub(crate) fn bn_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, plane) = check(x, gamma, beta)?;
    let count = n * plane;
    let m = T::from_usize_lossy(count);
    let eps = T::from_f64_lossy(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for (i, p) in x.data().chunks(plane).enumerate() {
        mean[i % c] += p.iter().copied().sum::<T>();
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for (i, p) in x.data().chunks(plane).enumerate() {
        let mu = mean[i % c];
        var[i % c] += p.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut out = x.clone();
    for (i, (xh, o)) in xhat.data_mut().chunks_mut(plane).zip(out.data_mut().chunks_mut(plane)).enumerate() {
        let ch = i % c;
        let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
        for (a, y) in xh.iter_mut().zip(o.iter_mut()) {
            *a = (*a - mu) * is;
            *y = g * *a + b;
        }
    }
    let correction = if count > 1 {
        m / T::from_usize_lossy(count - 1)
    } else {
        T::one()
    };
    let var_unbiased = var.iter().map(|&v| v * correction).collect();
    Ok((
        out,
        BnCache {
            xhat,
            inv_std,
            mean,
            var_unbiased,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_train_backward<T: Scalar>(
    grad: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.len();
    let (n, _, h, w) = grad.dims4().expect("batch_norm gradient is rank 4");
    let plane = h * w;
    let m = T::from_usize_lossy(n * plane);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, (g, xh)) in grad.data().chunks(plane).zip(cache.xhat.data().chunks(plane)).enumerate() {
        let ch = i % c;
        dbeta[ch] += g.iter().copied().sum::<T>();
        dgamma[ch] += g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
    }
    let mut dx = grad.clone();
    for (i, (d, xh)) in dx.data_mut().chunks_mut(plane).zip(cache.xhat.data().chunks(plane)).enumerate() {
        let ch = i % c;
        let k = gamma.data()[ch] * cache.inv_std[ch] / m;
        for (v, &a) in d.iter_mut().zip(xh) {
            *v = k * (m * *v - dbeta[ch] - a * dgamma[ch]);
        }
    }
    (
        dx,
        Tensor::new(gamma.shape(), dgamma).expect("gamma-shaped"),
        Tensor::new(gamma.shape(), dbeta).expect("gamma-shaped"),
    )
}

pub(crate) fn bn_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
) -> Result<Tensor<T>> {
    let (_, c, plane) = check(x, gamma, beta)?;
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::shape("batch_norm running stats", x.shape(), &[stats.mean.len()]));
    }
    let eps = T::from_f64_lossy(BN_EPS);
    let mut out = x.clone();
    for (i, p) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        let scale = gamma.data()[ch] / (stats.var[ch] + eps).sqrt();
        let shift = beta.data()[ch] - stats.mean[ch] * scale;
        p.iter_mut().for_each(|v| *v = *v * scale + shift);
    }
    Ok(out)
}

/// Returns `(dx, dgamma, dbeta)` for eval-mode normalization.
pub(crate) fn bn_eval_backward<T: Scalar>(
    x: &Tensor<T>,
    grad: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &RunningStats<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.len();
    let plane = x.len() / x.shape()[0].max(1) / c.max(1);
    let eps = T::from_f64_lossy(BN_EPS);
    let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = grad.clone();
    for (i, (d, xp)) in dx.data_mut().chunks_mut(plane).zip(x.data().chunks(plane)).enumerate() {
        let ch = i % c;
        for (v, &xv) in d.iter_mut().zip(xp) {
            dbeta[ch] += *v;
            dgamma[ch] += *v * (xv - stats.mean[ch]) * inv_std[ch];
            *v = *v * gamma.data()[ch] * inv_std[ch];
        }
    }
    (
        dx,
        Tensor::new(gamma.shape(), dgamma).expect("gamma-shaped"),
        Tensor::new(gamma.shape(), dbeta).expect("gamma-shaped"),
    )
}

/// Per-channel batch normalization. Train mode normalizes over `(N, H, W)`
/// and folds the batch statistics into `stats`; eval mode uses `stats`.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: Mode,
    stats: &mut RunningStats<T>,
) -> Result<Tensor<T>> {
    match mode {
        Mode::Train => {
            let (out, cache) = bn_train_forward(x, gamma, beta)?;
            stats.update(&cache.mean, &cache.var_unbiased);
            Ok(out)
        }
        Mode::Eval => bn_eval_forward(x, gamma, beta, stats),
    }
}
