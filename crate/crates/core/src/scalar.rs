//! Floating-point scalar abstraction shared by every kernel.
//!
//! Training runs in `f32`; gradient checks and oracles run in `f64`. Everything
//! above this module is written once against [`Scalar`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use rustfft::FftNum;

pub trait Scalar:
    Float + NumAssign + FloatConst + FromPrimitive + ToPrimitive + FftNum + Sum + Default + Display + Debug + Send + Sync + 'static
{
    /// Raw strided GEMM: `c = alpha * a * b + beta * c` with `a` (m×k), `b`
    /// (k×n) and `c` (m×n) described by row/column strides.
    ///
    /// # Safety
    /// The strides must keep every addressed element inside the buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// `v ← exp(v)` element-wise.
    fn exp_in_place(v: &mut [Self]) {
        for x in v {
            *x = x.exp();
        }
    }

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts to every scalar type")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize converts to every scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    /// Branch-free Cephes-style `expf` so the loop vectorizes on baseline
    /// x86-64; within about two ulp of `f32::exp`. Inputs below `-87.3` flush
    /// to zero.
    fn exp_in_place(v: &mut [f32]) {
        const LOG2E: f32 = std::f32::consts::LOG2_E;
        const LN2_HI: f32 = 0.693_359_4;
        const LN2_LO: f32 = -2.121_944_4e-4;
        // Adding 1.5·2²³ rounds to an integer held in the low mantissa bits.
        const SHIFT: f32 = 12_582_912.0;
        for x in v.iter_mut() {
            let xc = x.clamp(-87.3, 88.7);
            let shifted = xc * LOG2E + SHIFT;
            let n = shifted - SHIFT;
            let r = xc - n * LN2_HI - n * LN2_LO;
            let mut p = 1.987_569_1e-4f32;
            p = p * r + 1.398_199_9e-3;
            p = p * r + 8.333_452e-3;
            p = p * r + 4.166_579_6e-2;
            p = p * r + 1.666_666_5e-1;
            p = p * r + 5e-1;
            let y = p * r * r + r + 1.0;
            let ni = shifted.to_bits().wrapping_sub(SHIFT.to_bits());
            let scale = f32::from_bits(ni.wrapping_add(127) << 23);
            *x = if *x < -87.3 { 0.0 } else { y * scale };
        }
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_expf_matches_libm() {
        let xs: Vec<f32> = (0..20_001).map(|i| -87.0 + i as f32 * (175.0 / 20_000.0)).collect();
        let mut ys = xs.clone();
        f32::exp_in_place(&mut ys);
        for (&x, &y) in xs.iter().zip(&ys) {
            let want = (x as f64).exp();
            assert!(((y as f64 - want) / want).abs() < 3e-7, "exp({x}) = {y}, want {want}");
        }
        let mut tiny = [-100.0f32, f32::NEG_INFINITY];
        f32::exp_in_place(&mut tiny);
        assert_eq!(tiny, [0.0, 0.0]);
    }
}
