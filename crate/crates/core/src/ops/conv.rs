//! 2-D cross-correlation via per-image im2col and GEMM.

use crate::error::{Error, Result};
use crate::ops::gemm::gemm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<(usize, usize, Self)> {
        let [n, c, h, w] = input[..] else {
            return Err(Error::shape("conv2d input", input, &[0, 0, 0, 0]));
        };
        let [co, ci, kh, kw] = kernel[..] else {
            return Err(Error::shape("conv2d kernel", kernel, &[0, 0, 0, 0]));
        };
        if ci != c {
            return Err(Error::shape("conv2d", input, kernel));
        }
        if stride == 0 {
            return Err(Error::Param("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", input, kernel));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok((
            n,
            co,
            Self {
                c,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
            },
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `lo..hi` whose input column `ox·stride + kx − pad`
    /// falls inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride).min(self.wo);
        let hi = match (self.w + self.pad).checked_sub(kx + 1) {
            Some(last) => (last / self.stride + 1).min(self.wo),
            None => 0,
        };
        (lo, hi.max(lo))
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * plane;
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &img[(ci * self.h + iy as usize) * self.w..][..self.w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if lo == hi {
                            continue;
                        }
                        let first = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, &v) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(self.stride)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let plane = self.out_plane();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * plane;
                    let (lo, hi) = self.valid_cols(kx);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * self.stride + kx - self.pad;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(ci * self.h + iy as usize) * self.w..][..self.w];
                        let src = &cols[row + oy * self.wo + lo..row + oy * self.wo + hi];
                        for (d, &v) in dst[first..].iter_mut().step_by(self.stride).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input` `(N, C_in, H, W)` with `kernel`
/// `(C_out, C_in, kh, kw)`. Output spatial dims are
/// `(H + 2·pad − kh) / stride + 1` (floor), likewise for the width.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (n, co, g) = Geometry::new(input.shape(), kernel.shape(), stride, pad)?;
    let in_len = g.c * g.h * g.w;
    let plane = g.out_plane();
    let mut out = vec![T::zero(); n * co * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * plane]
    };
    for img in 0..n {
        let x = &input.data()[img * in_len..(img + 1) * in_len];
        let src: &[T] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        gemm(
            false,
            false,
            co,
            plane,
            g.patch(),
            T::one(),
            kernel.data(),
            src,
            T::zero(),
            &mut out[img * co * plane..(img + 1) * co * plane],
        );
    }
    Tensor::new(&[n, co, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to its input (if requested) and
/// kernel (if requested), given the output gradient.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, co, g) = Geometry::new(input.shape(), kernel.shape(), stride, pad)?;
    if grad_out.shape() != [n, co, g.ho, g.wo] {
        return Err(Error::shape("conv2d backward", grad_out.shape(), &[n, co, g.ho, g.wo]));
    }
    let in_len = g.c * g.h * g.w;
    let plane = g.out_plane();
    let patch = g.patch();
    let mut dx = need_input.then(|| vec![T::zero(); input.len()]);
    let mut dw = need_kernel.then(|| vec![T::zero(); kernel.len()]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * plane }];
    let mut dcols = vec![T::zero(); if need_input && !g.is_pointwise() { patch * plane } else { 0 }];
    for img in 0..n {
        let gout = &grad_out.data()[img * co * plane..(img + 1) * co * plane];
        if let Some(dw) = dw.as_mut() {
            let x = &input.data()[img * in_len..(img + 1) * in_len];
            let src: &[T] = if g.is_pointwise() {
                x
            } else {
                g.im2col(x, &mut cols);
                &cols
            };
            gemm(false, true, co, patch, plane, T::one(), gout, src, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[img * in_len..(img + 1) * in_len];
            if g.is_pointwise() {
                gemm(true, false, patch, plane, co, T::one(), kernel.data(), gout, T::zero(), dst);
            } else {
                gemm(true, false, patch, plane, co, T::one(), kernel.data(), gout, T::zero(), &mut dcols);
                g.col2im_add(&dcols, dst);
            }
        }
    }
    let dx = dx.map(|d| Tensor::new(input.shape(), d)).transpose()?;
    let dw = dw.map(|d| Tensor::new(kernel.shape(), d)).transpose()?;
    Ok((dx, dw))
}
