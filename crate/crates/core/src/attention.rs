//! Windowed local self-attention and the cross-attention fusion used by the
//! review distillation path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::gemm::{gemm, transpose_into};
use crate::ops::{softmax_backward_rows, softmax_in_place};
use crate::params::NamedParams;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Single-head local self-attention over a `window×window` neighbourhood.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalAttnParams<T> {
    pub window: usize,
    /// `(C, C)` projections applied as `W·x_p`.
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    /// Relative position embeddings added to keys, `(window², C)`.
    pub rel: Tensor<T>,
}

impl<T: Scalar> LocalAttnParams<T> {
    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn from_parts(window: usize, wq: Tensor<T>, wk: Tensor<T>, wv: Tensor<T>, rel: Tensor<T>) -> Result<Self> {
        if window.is_multiple_of(2) {
            return Err(Error::Param(format!("local attention window {window} must be odd")));
        }
        let (c, c2) = wq.dims2()?;
        if c != c2 || wk.shape() != wq.shape() || wv.shape() != wq.shape() {
            return Err(Error::shape("local attention projections", wq.shape(), wk.shape()));
        }
        if rel.shape() != [window * window, c] {
            return Err(Error::shape("local attention embeddings", rel.shape(), &[window * window, c]));
        }
        Ok(Self { window, wq, wk, wv, rel })
    }
}

impl<T: Scalar> NamedParams<T> for LocalAttnParams<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("wq", &self.wq);
        f("wk", &self.wk);
        f("wv", &self.wv);
        f("rel", &self.rel);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("wq", &mut self.wq);
        f("wk", &mut self.wk);
        f("wv", &mut self.wv);
        f("rel", &mut self.rel);
    }
}

pub fn init_local_attention<T: Scalar>(channels: usize, window: usize, seed: u64) -> Result<LocalAttnParams<T>> {
    if channels == 0 {
        return Err(Error::Param("local attention needs at least one channel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (channels as f64).sqrt();
    let shape = [channels, channels];
    let wq = Tensor::rand_uniform(&shape, bound, &mut rng);
    let wk = Tensor::rand_uniform(&shape, bound, &mut rng);
    let wv = Tensor::rand_uniform(&shape, bound, &mut rng);
    let rel = Tensor::randn(&[window * window, channels], 0.02, &mut rng);
    LocalAttnParams::from_parts(window, wq, wk, wv, rel)
}

/// Token-major projection `X^T·W^T` of a channel-major `(C, P)` image.
fn project_tokens<T: Scalar>(img: &[T], w: &[T], c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * c];
    gemm(true, true, p, c, c, T::one(), img, w, T::zero(), &mut out);
    out
}

struct Window {
    h: usize,
    w: usize,
    size: usize,
}

impl Window {
    /// Neighbour of position `p` at window slot `t`, if inside the map.
    fn neighbour(&self, p: usize, t: usize) -> Option<usize> {
        let r = (self.size / 2) as isize;
        let (py, px) = ((p / self.w) as isize, (p % self.w) as isize);
        let y = py + (t / self.size) as isize - r;
        let x = px + (t % self.size) as isize - r;
        (y >= 0 && y < self.h as isize && x >= 0 && x < self.w as isize).then(|| y as usize * self.w + x as usize)
    }
}

fn check_local<T: Scalar>(x: &Tensor<T>, params: &LocalAttnParams<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if c != params.channels() {
        return Err(Error::shape("local_self_attention", x.shape(), params.wq.shape()));
    }
    if params.window > h.min(w) {
        return Err(Error::Param(format!(
            "local attention window {} exceeds feature map {h}x{w}",
            params.window
        )));
    }
    Ok((n, c, h, w))
}

/// Window logits for position `p`; out-of-map neighbours are zero vectors,
/// so their keys reduce to the position embedding.
fn window_logits<T: Scalar>(q: &[T], keys: &[T], rel: &[T], win: &Window, p: usize, c: usize, out: &mut [T]) {
    for (t, logit) in out.iter_mut().enumerate() {
        let r = &rel[t * c..(t + 1) * c];
        *logit = match win.neighbour(p, t) {
            Some(nb) => {
                let k = &keys[nb * c..(nb + 1) * c];
                q.iter().zip(k).zip(r).map(|((&a, &b), &e)| a * (b + e)).sum()
            }
            None => q.iter().zip(r).map(|(&a, &e)| a * e).sum(),
        };
    }
}

pub(crate) fn local_attention_forward<T: Scalar>(x: &Tensor<T>, params: &LocalAttnParams<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_local(x, params)?;
    let p_len = h * w;
    let win = Window { h, w, size: params.window };
    let slots = params.window * params.window;
    let mut out = vec![T::zero(); x.len()];
    let mut tokens = vec![T::zero(); p_len * c];
    let mut probs = vec![T::zero(); slots];
    for img in 0..n {
        let xi = &x.data()[img * c * p_len..(img + 1) * c * p_len];
        let q = project_tokens(xi, params.wq.data(), c, p_len);
        let k = project_tokens(xi, params.wk.data(), c, p_len);
        let v = project_tokens(xi, params.wv.data(), c, p_len);
        tokens.fill(T::zero());
        for p in 0..p_len {
            window_logits(&q[p * c..(p + 1) * c], &k, params.rel.data(), &win, p, c, &mut probs);
            softmax_in_place(&mut probs);
            let o = &mut tokens[p * c..(p + 1) * c];
            for (t, &s) in probs.iter().enumerate() {
                if let Some(nb) = win.neighbour(p, t) {
                    for (a, &b) in o.iter_mut().zip(&v[nb * c..(nb + 1) * c]) {
                        *a += s * b;
                    }
                }
            }
        }
        transpose_into(&tokens, p_len, c, &mut out[img * c * p_len..(img + 1) * c * p_len]);
    }
    Tensor::new(x.shape(), out)
}

pub(crate) struct LocalAttnGrads<T> {
    pub x: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub rel: Tensor<T>,
}

pub(crate) fn local_attention_backward<T: Scalar>(
    x: &Tensor<T>,
    params: &LocalAttnParams<T>,
    grad: &Tensor<T>,
) -> Result<LocalAttnGrads<T>> {
    let (n, c, h, w) = check_local(x, params)?;
    let p_len = h * w;
    let win = Window { h, w, size: params.window };
    let slots = params.window * params.window;
    let mut dx = vec![T::zero(); x.len()];
    let mut dwq = vec![T::zero(); c * c];
    let mut dwk = vec![T::zero(); c * c];
    let mut dwv = vec![T::zero(); c * c];
    let mut drel = vec![T::zero(); slots * c];
    let mut gt = vec![T::zero(); p_len * c];
    let mut probs = vec![T::zero(); slots];
    let mut dprobs = vec![T::zero(); slots];
    let mut dlogits = vec![T::zero(); slots];
    for img in 0..n {
        let range = img * c * p_len..(img + 1) * c * p_len;
        let xi = &x.data()[range.clone()];
        transpose_into(&grad.data()[range.clone()], c, p_len, &mut gt);
        let q = project_tokens(xi, params.wq.data(), c, p_len);
        let k = project_tokens(xi, params.wk.data(), c, p_len);
        let v = project_tokens(xi, params.wv.data(), c, p_len);
        let mut dq = vec![T::zero(); p_len * c];
        let mut dk = vec![T::zero(); p_len * c];
        let mut dv = vec![T::zero(); p_len * c];
        for p in 0..p_len {
            let qp = &q[p * c..(p + 1) * c];
            let gp = &gt[p * c..(p + 1) * c];
            window_logits(qp, &k, params.rel.data(), &win, p, c, &mut probs);
            softmax_in_place(&mut probs);
            for (t, dp) in dprobs.iter_mut().enumerate() {
                *dp = match win.neighbour(p, t) {
                    Some(nb) => {
                        let vn = &v[nb * c..(nb + 1) * c];
                        for (d, &g) in dv[nb * c..(nb + 1) * c].iter_mut().zip(gp) {
                            *d += probs[t] * g;
                        }
                        gp.iter().zip(vn).map(|(&a, &b)| a * b).sum()
                    }
                    None => T::zero(),
                };
            }
            softmax_backward_rows(&probs, &dprobs, slots, &mut dlogits);
            for (t, &da) in dlogits.iter().enumerate() {
                let r = &params.rel.data()[t * c..(t + 1) * c];
                let dqp = &mut dq[p * c..(p + 1) * c];
                match win.neighbour(p, t) {
                    Some(nb) => {
                        for ((d, &kv), &e) in dqp.iter_mut().zip(&k[nb * c..(nb + 1) * c]).zip(r) {
                            *d += da * (kv + e);
                        }
                        for (d, &qv) in dk[nb * c..(nb + 1) * c].iter_mut().zip(qp) {
                            *d += da * qv;
                        }
                    }
                    None => {
                        for (d, &e) in dqp.iter_mut().zip(r) {
                            *d += da * e;
                        }
                    }
                }
                for (d, &qv) in drel[t * c..(t + 1) * c].iter_mut().zip(qp) {
                    *d += da * qv;
                }
            }
        }
        let dxi = &mut dx[range];
        for (dt, wmat, dw) in [
            (&dq, params.wq.data(), &mut dwq),
            (&dk, params.wk.data(), &mut dwk),
            (&dv, params.wv.data(), &mut dwv),
        ] {
            gemm(true, true, c, c, p_len, T::one(), dt, xi, T::one(), dw);
            gemm(true, true, c, p_len, c, T::one(), wmat, dt, T::one(), dxi);
        }
    }
    Ok(LocalAttnGrads {
        x: Tensor::new(x.shape(), dx)?,
        wq: Tensor::new(params.wq.shape(), dwq)?,
        wk: Tensor::new(params.wk.shape(), dwk)?,
        wv: Tensor::new(params.wv.shape(), dwv)?,
        rel: Tensor::new(params.rel.shape(), drel)?,
    })
}

/// Records local self-attention on `tape` with parameters named
/// `<name>.wq`, `<name>.wk`, `<name>.wv`, `<name>.rel`.
pub fn local_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &LocalAttnParams<T>,
    name: &str,
) -> Result<Var> {
    check_local(tape.value(x), params)?;
    let wq = tape.param(format!("{name}.wq"), params.wq.clone())?;
    let wk = tape.param(format!("{name}.wk"), params.wk.clone())?;
    let wv = tape.param(format!("{name}.wv"), params.wv.clone())?;
    let rel = tape.param(format!("{name}.rel"), params.rel.clone())?;
    tape.local_attention(x, wq, wk, wv, rel, params.window)
}

/// Cross-attention fusion: the high-level (fused) map supplies queries, the
/// low-level map supplies keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttnParams<T> {
    /// `(C_hi, d)`.
    pub wq: Tensor<T>,
    /// `(C_lo, d)`.
    pub wk: Tensor<T>,
    /// `(C_lo, C_lo)`.
    pub wv: Tensor<T>,
    /// Divide logits by `√d`.
    pub scaled: bool,
}

impl<T: Scalar> CrossAttnParams<T> {
    pub fn from_parts(wq: Tensor<T>, wk: Tensor<T>, wv: Tensor<T>, scaled: bool) -> Result<Self> {
        let (_, d) = wq.dims2()?;
        let (c_lo, dk) = wk.dims2()?;
        if dk != d {
            return Err(Error::shape("cross attention W_K", wk.shape(), wq.shape()));
        }
        if wv.shape() != [c_lo, c_lo] {
            return Err(Error::shape("cross attention W_V", wv.shape(), &[c_lo, c_lo]));
        }
        Ok(Self { wq, wk, wv, scaled })
    }

    pub fn c_lo(&self) -> usize {
        self.wk.shape()[0]
    }

    pub fn c_hi(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[1]
    }

    pub fn logit_scale(&self) -> T {
        if self.scaled {
            T::one() / T::from_usize_lossy(self.dim()).sqrt()
        } else {
            T::one()
        }
    }
}

impl<T: Scalar> NamedParams<T> for CrossAttnParams<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("wq", &self.wq);
        f("wk", &self.wk);
        f("wv", &self.wv);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("wq", &mut self.wq);
        f("wk", &mut self.wk);
        f("wv", &mut self.wv);
    }
}

pub fn init_cross_attention<T: Scalar>(
    c_lo: usize,
    c_hi: usize,
    dim: usize,
    scaled: bool,
    seed: u64,
) -> Result<CrossAttnParams<T>> {
    if c_lo == 0 || c_hi == 0 || dim == 0 {
        return Err(Error::Param(format!("cross attention dims ({c_lo}, {c_hi}, {dim}) must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wq = Tensor::rand_uniform(&[c_hi, dim], 1.0 / (c_hi as f64).sqrt(), &mut rng);
    let wk = Tensor::rand_uniform(&[c_lo, dim], 1.0 / (c_lo as f64).sqrt(), &mut rng);
    let wv = Tensor::rand_uniform(&[c_lo, c_lo], 1.0 / (c_lo as f64).sqrt(), &mut rng);
    CrossAttnParams::from_parts(wq, wk, wv, scaled)
}

/// Nearest-neighbour source index for each of `out` positions drawn from `inp`.
pub(crate) fn nearest_index(out: usize, inp: usize) -> impl Iterator<Item = usize> {
    (0..out).map(move |i| i * inp / out)
}

/// Nearest-neighbour query resampling, reduced to distinct source pixels.
/// Output positions that share a source pixel have identical queries and so
/// identical attention rows; attention runs once per source and is copied out.
struct QueryGrid {
    src_rows: Vec<usize>,
    src_cols: Vec<usize>,
    /// Distinct-query index of every output token.
    slot: Vec<usize>,
}

impl QueryGrid {
    fn new((h, w): (usize, usize), (hh, hw): (usize, usize)) -> Self {
        let (src_rows, row_slot) = distinct(nearest_index(h, hh));
        let (src_cols, col_slot) = distinct(nearest_index(w, hw));
        let slot = (0..h * w).map(|t| row_slot[t / w] * src_cols.len() + col_slot[t % w]).collect();
        Self { src_rows, src_cols, slot }
    }

    fn len(&self) -> usize {
        self.src_rows.len() * self.src_cols.len()
    }

    /// Offset `sy·hw + sx` of distinct query `u` within one high-map channel.
    fn source(&self, u: usize, hw: usize) -> usize {
        let uc = self.src_cols.len();
        self.src_rows[u / uc] * hw + self.src_cols[u % uc]
    }
}

/// Run-length dedup of a non-decreasing index sequence: the distinct values
/// and, per position, the index of its value among them.
fn distinct(idx: impl Iterator<Item = usize>) -> (Vec<usize>, Vec<usize>) {
    let mut values = Vec::new();
    let mut slot = Vec::new();
    for i in idx {
        if values.last() != Some(&i) {
            values.push(i);
        }
        slot.push(values.len() - 1);
    }
    (values, slot)
}

/// Distinct query tokens `(U, C_hi)` of one image.
fn query_tokens<T: Scalar>(high: &[T], c_hi: usize, (hh, hw): (usize, usize), grid: &QueryGrid) -> Vec<T> {
    let mut out = vec![T::zero(); grid.len() * c_hi];
    for (u, row) in out.chunks_mut(c_hi).enumerate() {
        let src = grid.source(u, hw);
        for (c, v) in row.iter_mut().enumerate() {
            *v = high[c * hh * hw + src];
        }
    }
    out
}

fn check_cross<T: Scalar>(
    low: &Tensor<T>,
    high: &Tensor<T>,
    params: &CrossAttnParams<T>,
) -> Result<((usize, usize, usize, usize), (usize, usize, usize))> {
    let (n, c_lo, h, w) = low.dims4()?;
    let (nh, c_hi, hh, hw) = high.dims4()?;
    if nh != n || c_lo != params.c_lo() || c_hi != params.c_hi() {
        return Err(Error::shape("cross_attention_fuse", low.shape(), high.shape()));
    }
    Ok(((n, c_lo, h, w), (c_hi, hh, hw)))
}

/// Query rows per attention tile; bounds the probability scratch buffers at
/// `ROW_BLOCK·T` values each instead of `T²`.
const ROW_BLOCK: usize = 128;

/// Row-softmax of `scale · q·kᵀ` into `s` (`rows × tokens`).
fn attention_probs<T: Scalar>(q: &[T], k: &[T], rows: usize, tokens: usize, d: usize, scale: T, s: &mut [T]) {
    gemm(false, true, rows, tokens, d, scale, q, k, T::zero(), s);
    for row in s[..rows * tokens].chunks_mut(tokens) {
        softmax_in_place(row);
    }
}

fn row_blocks(tokens: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..tokens).step_by(ROW_BLOCK).map(move |r0| (r0, ROW_BLOCK.min(tokens - r0)))
}

/// Per-image projections: `Q` over the distinct queries, `K` and `V` over
/// every low-level token. Returns the distinct query tokens.
#[allow(clippy::too_many_arguments)]
fn cross_tokens<T: Scalar>(
    lo: &[T],
    hi: &[T],
    params: &CrossAttnParams<T>,
    grid: &QueryGrid,
    (c_lo, tokens): (usize, usize),
    (c_hi, hh, hw): (usize, usize, usize),
    q: &mut [T],
    k: &mut [T],
    v: &mut [T],
) -> Vec<T> {
    let d = params.dim();
    let xq = query_tokens(hi, c_hi, (hh, hw), grid);
    gemm(false, false, grid.len(), d, c_hi, T::one(), &xq, params.wq.data(), T::zero(), q);
    gemm(true, false, tokens, d, c_lo, T::one(), lo, params.wk.data(), T::zero(), k);
    gemm(true, false, tokens, c_lo, c_lo, T::one(), lo, params.wv.data(), T::zero(), v);
    xq
}

/// Forward pass. Probabilities are formed one row tile at a time in a
/// scratch buffer; backward recomputes them rather than storing `N·U·T` values.
pub(crate) fn cross_attention_forward<T: Scalar>(
    low: &Tensor<T>,
    high: &Tensor<T>,
    params: &CrossAttnParams<T>,
) -> Result<Tensor<T>> {
    let ((n, c_lo, h, w), (c_hi, hh, hw)) = check_cross(low, high, params)?;
    let grid = QueryGrid::new((h, w), (hh, hw));
    let (tokens, uq, d) = (h * w, grid.len(), params.dim());
    let mut out = vec![T::zero(); low.len()];
    let mut s = vec![T::zero(); ROW_BLOCK * tokens];
    let mut q = vec![T::zero(); uq * d];
    let mut k = vec![T::zero(); tokens * d];
    let mut v = vec![T::zero(); tokens * c_lo];
    let mut o = vec![T::zero(); uq * c_lo];
    for img in 0..n {
        let lo = &low.data()[img * c_lo * tokens..(img + 1) * c_lo * tokens];
        let hi = &high.data()[img * c_hi * hh * hw..(img + 1) * c_hi * hh * hw];
        cross_tokens(lo, hi, params, &grid, (c_lo, tokens), (c_hi, hh, hw), &mut q, &mut k, &mut v);
        for (r0, rb) in row_blocks(uq) {
            attention_probs(&q[r0 * d..], &k, rb, tokens, d, params.logit_scale(), &mut s);
            gemm(false, false, rb, c_lo, tokens, T::one(), &s, &v, T::zero(), &mut o[r0 * c_lo..]);
        }
        let dst = &mut out[img * c_lo * tokens..(img + 1) * c_lo * tokens];
        for (t, &u) in grid.slot.iter().enumerate() {
            for c in 0..c_lo {
                dst[c * tokens + t] = o[u * c_lo + c];
            }
        }
    }
    Tensor::new(low.shape(), out)
}

pub(crate) struct CrossAttnGrads<T> {
    pub low: Tensor<T>,
    pub high: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

pub(crate) fn cross_attention_backward<T: Scalar>(
    low: &Tensor<T>,
    high: &Tensor<T>,
    params: &CrossAttnParams<T>,
    grad: &Tensor<T>,
) -> Result<CrossAttnGrads<T>> {
    let ((n, c_lo, h, w), (c_hi, hh, hw)) = check_cross(low, high, params)?;
    let grid = QueryGrid::new((h, w), (hh, hw));
    let (tokens, uq, d) = (h * w, grid.len(), params.dim());
    let scale = params.logit_scale();
    let mut dlow = vec![T::zero(); low.len()];
    let mut dhigh = vec![T::zero(); high.len()];
    let mut dwq = vec![T::zero(); c_hi * d];
    let mut dwk = vec![T::zero(); c_lo * d];
    let mut dwv = vec![T::zero(); c_lo * c_lo];
    let mut q = vec![T::zero(); uq * d];
    let mut k = vec![T::zero(); tokens * d];
    let mut v = vec![T::zero(); tokens * c_lo];
    let mut go = vec![T::zero(); uq * c_lo];
    let mut dv = vec![T::zero(); tokens * c_lo];
    let mut dq = vec![T::zero(); uq * d];
    let mut dk = vec![T::zero(); tokens * d];
    let mut s = vec![T::zero(); ROW_BLOCK * tokens];
    let mut ds = vec![T::zero(); ROW_BLOCK * tokens];
    let mut da = vec![T::zero(); ROW_BLOCK * tokens];
    let mut dxq = vec![T::zero(); uq * c_hi];
    for img in 0..n {
        let lo_range = img * c_lo * tokens..(img + 1) * c_lo * tokens;
        let lo = &low.data()[lo_range.clone()];
        let hi = &high.data()[img * c_hi * hh * hw..(img + 1) * c_hi * hh * hw];
        let xq = cross_tokens(lo, hi, params, &grid, (c_lo, tokens), (c_hi, hh, hw), &mut q, &mut k, &mut v);
        // Copies of one distinct row receive the sum of their gradients.
        let g = &grad.data()[lo_range.clone()];
        go.fill(T::zero());
        for (t, &u) in grid.slot.iter().enumerate() {
            for c in 0..c_lo {
                go[u * c_lo + c] += g[c * tokens + t];
            }
        }
        dv.fill(T::zero());
        dk.fill(T::zero());
        for (r0, rb) in row_blocks(uq) {
            let (q_blk, go_blk) = (&q[r0 * d..(r0 + rb) * d], &go[r0 * c_lo..(r0 + rb) * c_lo]);
            attention_probs(q_blk, &k, rb, tokens, d, scale, &mut s);
            gemm(true, false, tokens, c_lo, rb, T::one(), &s, go_blk, T::one(), &mut dv);
            gemm(false, true, rb, tokens, c_lo, T::one(), go_blk, &v, T::zero(), &mut ds);
            softmax_backward_rows(&s[..rb * tokens], &ds[..rb * tokens], tokens, &mut da);
            gemm(false, false, rb, d, tokens, scale, &da, &k, T::zero(), &mut dq[r0 * d..]);
            gemm(true, false, tokens, d, rb, scale, &da, q_blk, T::one(), &mut dk);
        }

        gemm(true, false, c_hi, d, uq, T::one(), &xq, &dq, T::one(), &mut dwq);
        gemm(false, true, uq, c_hi, d, T::one(), &dq, params.wq.data(), T::zero(), &mut dxq);
        let dhi = &mut dhigh[img * c_hi * hh * hw..(img + 1) * c_hi * hh * hw];
        for (u, row) in dxq.chunks(c_hi).enumerate() {
            let src = grid.source(u, hw);
            for (c, &gv) in row.iter().enumerate() {
                dhi[c * hh * hw + src] += gv;
            }
        }

        gemm(false, false, c_lo, d, tokens, T::one(), lo, &dk, T::one(), &mut dwk);
        gemm(false, false, c_lo, c_lo, tokens, T::one(), lo, &dv, T::one(), &mut dwv);
        let dlo = &mut dlow[lo_range];
        gemm(false, true, c_lo, tokens, d, T::one(), params.wk.data(), &dk, T::zero(), dlo);
        gemm(false, true, c_lo, tokens, c_lo, T::one(), params.wv.data(), &dv, T::one(), dlo);
    }
    Ok(CrossAttnGrads {
        low: Tensor::new(low.shape(), dlow)?,
        high: Tensor::new(high.shape(), dhigh)?,
        wq: Tensor::new(params.wq.shape(), dwq)?,
        wk: Tensor::new(params.wk.shape(), dwk)?,
        wv: Tensor::new(params.wv.shape(), dwv)?,
    })
}

/// Records the fusion `u(low, high)` on `tape` with parameters named
/// `<name>.wq`, `<name>.wk`, `<name>.wv`. The output has `low`'s shape.
pub fn cross_attention_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    low: Var,
    high: Var,
    params: &CrossAttnParams<T>,
    name: &str,
) -> Result<Var> {
    check_cross(tape.value(low), tape.value(high), params)?;
    let wq = tape.param(format!("{name}.wq"), params.wq.clone())?;
    let wk = tape.param(format!("{name}.wk"), params.wk.clone())?;
    let wv = tape.param(format!("{name}.wv"), params.wv.clone())?;
    tape.cross_attention(low, high, wq, wk, wv, params.scaled)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_one_with_identity_values_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let mut p = init_local_attention::<f64>(3, 1, 0).unwrap();
        p.wv = Tensor::eye(3);
        p.rel = Tensor::zeros(&[1, 3]);
        let y = local_attention_forward(&x, &p).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Tensor::<f64>::zeros(&[1, 2, 5, 5]);
        let mut p = init_local_attention::<f64>(2, 3, 4).unwrap();
        p.rel = Tensor::zeros(&[9, 2]);
        let y = local_attention_forward(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oversized_window_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2, 3, 8]);
        let p = init_local_attention::<f64>(2, 5, 0).unwrap();
        assert!(matches!(local_attention_forward(&x, &p), Err(Error::Param(_))));
        assert!(init_local_attention::<f64>(2, 4, 0).is_err());
    }

    #[test]
    fn single_token_cross_attention_returns_projected_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let low = Tensor::<f64>::randn(&[2, 3, 1, 1], 1.0, &mut rng);
        let high = Tensor::<f64>::randn(&[2, 5, 1, 1], 1.0, &mut rng);
        let mut p = init_cross_attention::<f64>(3, 5, 4, true, 9).unwrap();
        p.wv = Tensor::eye(3);
        let y = cross_attention_forward(&low, &high, &p).unwrap();
        for (a, b) in low.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_value_projection_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let low = Tensor::<f64>::randn(&[1, 3, 4, 4], 1.0, &mut rng);
        let high = Tensor::<f64>::randn(&[1, 5, 2, 2], 1.0, &mut rng);
        let mut p = init_cross_attention::<f64>(3, 5, 4, true, 9).unwrap();
        p.wv = Tensor::zeros(&[3, 3]);
        let y = cross_attention_forward(&low, &high, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nearest_index_up_and_down() {
        assert_eq!(nearest_index(4, 2).collect::<Vec<_>>(), vec![0, 0, 1, 1]);
        assert_eq!(nearest_index(2, 4).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(nearest_index(3, 3).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn query_grid_keeps_one_query_per_source_pixel() {
        let up = QueryGrid::new((4, 6), (2, 3));
        assert_eq!(up.len(), 6);
        assert_eq!(up.slot[..6], [0, 0, 1, 1, 2, 2]);
        assert_eq!(up.slot[12..18], [3, 3, 4, 4, 5, 5]);
        assert_eq!(up.source(5, 3), 3 + 2);
        let down = QueryGrid::new((2, 2), (4, 4));
        assert_eq!(down.len(), 4);
        assert_eq!(down.slot, vec![0, 1, 2, 3]);
        assert_eq!(down.source(3, 4), 2 * 4 + 2);
    }
}
