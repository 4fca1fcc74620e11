//! Brute-force 64-bit reference implementations.
//!
//! Nothing here calls into the kernels it validates: every oracle is a direct
//! loop over plain slices.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Outcome of comparing one kernel against its oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub op: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seeds: Vec<u64>,
}

impl OracleReport {
    pub fn new(op: impl Into<String>, max_rel_err: f64, tolerance: f64, seeds: Vec<u64>) -> Self {
        Self {
            op: op.into(),
            max_rel_err,
            tolerance,
            pass: max_rel_err <= tolerance,
            seeds,
        }
    }

    pub fn csv_header() -> &'static str {
        "op,max_rel_err,tolerance,pass"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{:e},{:e},{}", self.op, self.max_rel_err, self.tolerance, self.pass)
    }
}

/// Max absolute deviation normalized by the reference's largest magnitude.
/// NaN anywhere yields `inf`.
pub fn rel_err(actual: &[f64], expected: &[f64]) -> f64 {
    if actual.len() != expected.len() {
        return f64::INFINITY;
    }
    let mut scale = 0.0f64;
    let mut worst = 0.0f64;
    for (&a, &e) in actual.iter().zip(expected) {
        if !a.is_finite() || !e.is_finite() {
            return f64::INFINITY;
        }
        scale = scale.max(e.abs());
        worst = worst.max((a - e).abs());
    }
    if worst == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        worst / scale
    }
}

/// Complex variant of [`rel_err`] using moduli.
pub fn rel_err_complex(actual: &[Complex64], expected: &[Complex64]) -> f64 {
    if actual.len() != expected.len() {
        return f64::INFINITY;
    }
    let scale = expected.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    let worst = actual.iter().zip(expected).fold(0.0f64, |m, (a, e)| m.max((a - e).norm()));
    if !worst.is_finite() {
        f64::INFINITY
    } else if worst == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        worst / scale
    }
}

/// Literal double-sum DFT of one `h×w` slice; the inverse carries `1/(h·w)`.
pub fn naive_dft2(slice: &[Complex64], h: usize, w: usize, direction: Direction) -> Vec<Complex64> {
    assert_eq!(slice.len(), h * w, "slice length must be h*w");
    let sign = match direction {
        Direction::Forward => -1.0,
        Direction::Inverse => 1.0,
    };
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..h {
                for l in 0..w {
                    let phase = sign * 2.0 * PI * ((u * k) as f64 / h as f64 + (v * l) as f64 / w as f64);
                    acc += slice[k * w + l] * Complex64::new(phase.cos(), phase.sin());
                }
            }
            out[u * w + v] = match direction {
                Direction::Forward => acc,
                Direction::Inverse => acc / (h * w) as f64,
            };
        }
    }
    out
}

/// Six-nested-loop cross-correlation over `(n, c, h, w)` input and
/// `(co, c, kh, kw)` kernel.
pub fn naive_conv2d(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    k: &[f64],
    kdims: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (n, c, h, w) = dims;
    let (co, ci, kh, kw) = kdims;
    assert_eq!(c, ci);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += x[((b * c + ch) * h + iy as usize) * w + ix as usize]
                                        * k[((o * c + ch) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[((b * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Triple-loop `a (rows×inner) · b (inner×cols)`.
pub fn naive_matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            for p in 0..inner {
                acc += a[i * inner + p] * b[p * cols + j];
            }
            out[i * cols + j] = acc;
        }
    }
    out
}

/// Direct `exp(x_i) / Σ exp(x_j)` without max subtraction.
pub fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = row.iter().map(|v| v.exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Five-nested-loop global filtering: `out[b,o,u,v] = Σ_c z[b,c,u,v]·k[o,c,u,v]`.
pub fn naive_global_filter(
    z: &[Complex64],
    dims: (usize, usize, usize, usize),
    k: &[Complex64],
    c_out: usize,
) -> Vec<Complex64> {
    let (n, c_in, h, w) = dims;
    let mut out = vec![Complex64::new(0.0, 0.0); n * c_out * h * w];
    for b in 0..n {
        for o in 0..c_out {
            for u in 0..h {
                for v in 0..w {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for c in 0..c_in {
                        acc += z[((b * c_in + c) * h + u) * w + v] * k[((o * c_in + c) * h + u) * w + v];
                    }
                    out[((b * c_out + o) * h + u) * w + v] = acc;
                }
            }
        }
    }
    out
}

/// Per-query score loop: `softmax(scale · q·kᵀ) · values`.
pub fn naive_attention(
    queries: &[f64],
    keys: &[f64],
    values: &[f64],
    n_queries: usize,
    n_keys: usize,
    dim: usize,
    value_dim: usize,
    scale: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; n_queries * value_dim];
    for qi in 0..n_queries {
        let scores: Vec<f64> = (0..n_keys)
            .map(|ki| {
                let mut s = 0.0;
                for d in 0..dim {
                    s += queries[qi * dim + d] * keys[ki * dim + d];
                }
                s * scale
            })
            .collect();
        let weights = naive_softmax(&scores);
        for (ki, wgt) in weights.iter().enumerate() {
            for d in 0..value_dim {
                out[qi * value_dim + d] += wgt * values[ki * value_dim + d];
            }
        }
    }
    out
}

/// Per-position windowed attention with zero padding. Projections are
/// `(c, c)` matrices applied as `W·x`; `rel` is `(window², c)`.
#[allow(clippy::too_many_arguments)]
pub fn naive_local_attention(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    rel: &[f64],
    window: usize,
) -> Vec<f64> {
    let (n, c, h, w) = dims;
    let r = (window / 2) as isize;
    let apply = |m: &[f64], vec: &[f64]| -> Vec<f64> {
        (0..c).map(|i| (0..c).map(|j| m[i * c + j] * vec[j]).sum()).collect()
    };
    let pixel = |b: usize, y: isize, xx: isize| -> Vec<f64> {
        if y < 0 || y >= h as isize || xx < 0 || xx >= w as isize {
            vec![0.0; c]
        } else {
            (0..c).map(|ch| x[((b * c + ch) * h + y as usize) * w + xx as usize]).collect()
        }
    };
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for py in 0..h as isize {
            for px in 0..w as isize {
                let q = apply(wq, &pixel(b, py, px));
                let mut logits = Vec::new();
                let mut vals = Vec::new();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let t = ((dy + r) * window as isize + (dx + r)) as usize;
                        let nb = pixel(b, py + dy, px + dx);
                        let key: Vec<f64> = apply(wk, &nb).iter().zip(&rel[t * c..(t + 1) * c]).map(|(a, e)| a + e).collect();
                        logits.push(q.iter().zip(&key).map(|(a, k)| a * k).sum::<f64>());
                        vals.push(apply(wv, &nb));
                    }
                }
                let s = naive_softmax(&logits);
                for ch in 0..c {
                    let v: f64 = s.iter().zip(&vals).map(|(p, val)| p * val[ch]).sum();
                    out[((b * c + ch) * h + py as usize) * w + px as usize] = v;
                }
            }
        }
    }
    out
}

/// Cross-attention fusion by explicit token loops: nearest-resample the
/// high map, project tokens, then [`naive_attention`].
#[allow(clippy::too_many_arguments)]
pub fn naive_cross_attention(
    low: &[f64],
    low_dims: (usize, usize, usize, usize),
    high: &[f64],
    high_dims: (usize, usize, usize, usize),
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    dim: usize,
    scale: f64,
) -> Vec<f64> {
    let (n, c_lo, h, w) = low_dims;
    let (_, c_hi, hh, hw) = high_dims;
    let tokens = h * w;
    let mut out = vec![0.0; low.len()];
    for b in 0..n {
        let mut xq = vec![0.0; tokens * c_hi];
        let mut xl = vec![0.0; tokens * c_lo];
        for y in 0..h {
            for x in 0..w {
                let t = y * w + x;
                let sy = ((y as f64) * (hh as f64) / (h as f64)).floor() as usize;
                let sx = ((x as f64) * (hw as f64) / (w as f64)).floor() as usize;
                for c in 0..c_hi {
                    xq[t * c_hi + c] = high[((b * c_hi + c) * hh + sy) * hw + sx];
                }
                for c in 0..c_lo {
                    xl[t * c_lo + c] = low[((b * c_lo + c) * h + y) * w + x];
                }
            }
        }
        let q = naive_matmul(&xq, wq, tokens, c_hi, dim);
        let k = naive_matmul(&xl, wk, tokens, c_lo, dim);
        let v = naive_matmul(&xl, wv, tokens, c_lo, c_lo);
        let o = naive_attention(&q, &k, &v, tokens, tokens, dim, c_lo, scale);
        for t in 0..tokens {
            for c in 0..c_lo {
                out[(b * c_lo + c) * tokens + t] = o[t * c_lo + c];
            }
        }
    }
    out
}

/// Central differences `(f(x+h·e_i) − f(x−h·e_i)) / 2h` per coordinate.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, at: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut x = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!("non-finite function value at coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}
