//! Per-channel 2-D discrete Fourier transforms and the ideal high-pass mask.
//!
//! Forward transform is unnormalized; the inverse carries the `1/(H·W)`
//! factor. DC sits at index `(0, 0)` (no shift).

use num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::ops::gemm::transpose_into;
use crate::scalar::Scalar;
use crate::tensor::{ComplexTensor, Tensor};

/// Unnormalized 2-D transform of every contiguous `h×w` plane in `data`.
fn transform_planes<T: Scalar>(data: &mut [Complex<T>], h: usize, w: usize, direction: FftDirection) {
    if data.is_empty() {
        return;
    }
    let mut planner = FftPlanner::<T>::new();
    let row_fft = planner.plan_fft(w, direction);
    let col_fft = planner.plan_fft(h, direction);
    if w > 1 {
        row_fft.process(data);
    }
    if h > 1 {
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); h * w];
        for plane in data.chunks_mut(h * w) {
            transpose_into(plane, h, w, &mut scratch);
            col_fft.process(&mut scratch);
            transpose_into(&scratch, w, h, plane);
        }
    }
}

/// Forward 2-D DFT of each `(batch, channel)` slice of a real tensor.
pub fn fft2<T: Scalar>(input: &Tensor<T>) -> Result<ComplexTensor<T>> {
    let mut z = ComplexTensor::from_real(input);
    let (_, _, h, w) = z.dims4()?;
    transform_planes(z.data_mut(), h, w, FftDirection::Forward);
    Ok(z)
}

/// Forward 2-D DFT of each slice of a complex tensor.
pub fn fft2_complex<T: Scalar>(input: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    let mut z = input.clone();
    let (_, _, h, w) = z.dims4()?;
    transform_planes(z.data_mut(), h, w, FftDirection::Forward);
    Ok(z)
}

/// Inverse 2-D DFT (with the `1/(H·W)` factor) of each slice.
pub fn ifft2<T: Scalar>(input: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    let mut z = input.clone();
    let (_, _, h, w) = z.dims4()?;
    transform_planes(z.data_mut(), h, w, FftDirection::Inverse);
    let inv = T::one() / T::from_usize_lossy(h * w);
    z.data_mut().iter_mut().for_each(|v| *v = v.scale(inv));
    Ok(z)
}

/// Inverse transform without the normalization factor; the adjoint of [`fft2`].
pub(crate) fn ifft2_unnormalized<T: Scalar>(input: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    let mut z = input.clone();
    let (_, _, h, w) = z.dims4()?;
    transform_planes(z.data_mut(), h, w, FftDirection::Inverse);
    Ok(z)
}

/// Ideal high-pass mask: the `⌈fraction·H·W⌉` lowest frequencies are zeroed.
///
/// "Lowest" is measured by the wrap-around distance
/// `√(min(u, H−u)² + min(v, W−v)²)`, ties broken by `(u, v)` lexicographic
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct HpfMask {
    h: usize,
    w: usize,
    fraction: f64,
    zero_count: usize,
    mask: Vec<bool>,
}

impl HpfMask {
    pub fn new(h: usize, w: usize, fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Param(format!("hpf fraction {fraction} outside [0, 1]")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Param(format!("hpf mask dims {h}x{w} must be positive")));
        }
        let total = h * w;
        // The epsilon absorbs products like 0.07·100 = 7.000000000000001.
        let zero_count = ((fraction * total as f64 - 1e-9).ceil().max(0.0) as usize).min(total);
        let mut order: Vec<(usize, usize, usize)> = (0..h)
            .flat_map(|u| (0..w).map(move |v| (u, v)))
            .map(|(u, v)| {
                let du = u.min(h - u);
                let dv = v.min(w - v);
                (du * du + dv * dv, u, v)
            })
            .collect();
        order.sort_unstable();
        let mut mask = vec![true; total];
        for &(_, u, v) in &order[..zero_count] {
            mask[u * w + v] = false;
        }
        Ok(Self {
            h,
            w,
            fraction,
            zero_count,
            mask,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    pub fn zero_count(&self) -> usize {
        self.zero_count
    }

    /// Whether frequency `(u, v)` passes the filter.
    pub fn passes(&self, u: usize, v: usize) -> bool {
        self.mask[u * self.w + v]
    }

    pub fn as_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.h, self.w], |i| if self.mask[i] { T::one() } else { T::zero() })
    }

    /// Zero the suppressed frequencies of every `(H, W)` plane.
    pub fn apply<T: Scalar>(&self, spectrum: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let (_, _, h, w) = spectrum.dims4()?;
        if (h, w) != (self.h, self.w) {
            return Err(Error::shape("hpf mask", spectrum.shape(), &[self.h, self.w]));
        }
        let mut out = spectrum.clone();
        let zero = Complex::new(T::zero(), T::zero());
        for plane in out.data_mut().chunks_mut(h * w) {
            for (z, &keep) in plane.iter_mut().zip(&self.mask) {
                if !keep {
                    *z = zero;
                }
            }
        }
        Ok(out)
    }
}

/// Convenience constructor mirroring [`HpfMask::new`].
pub fn build_hpf_mask(h: usize, w: usize, fraction: f64) -> Result<HpfMask> {
    HpfMask::new(h, w, fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: Complex<f64>, b: Complex<f64>, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn constant_slice_has_only_dc() {
        let x = Tensor::<f64>::full(&[1, 1, 2, 2], 1.75);
        let z = fft2(&x).unwrap();
        assert!(close(z.data()[0], Complex::new(7.0, 0.0), 1e-10));
        assert!(z.data()[1..].iter().all(|v| v.norm() <= 1e-10));
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        x.data_mut()[0] = 1.0;
        let z = fft2(&x).unwrap();
        assert!(z.data().iter().all(|v| close(*v, Complex::new(1.0, 0.0), 1e-12)));
    }

    #[test]
    fn all_ones_spectrum_inverts_to_impulse() {
        let z = ComplexTensor::<f64>::from_real(&Tensor::ones(&[1, 1, 2, 2]));
        let x = ifft2(&z).unwrap();
        assert!(close(x.data()[0], Complex::new(1.0, 0.0), 1e-12));
        assert!(x.data()[1..].iter().all(|v| v.norm() <= 1e-12));
    }

    #[test]
    fn round_trip_recovers_real_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (h, w) in [(8, 8), (5, 7), (1, 6), (9, 1)] {
            let x = Tensor::<f64>::randn(&[2, 3, h, w], 1.0, &mut rng);
            let back = ifft2(&fft2(&x).unwrap()).unwrap();
            for (a, b) in x.data().iter().zip(back.data()) {
                assert!((a - b.re).abs() <= 1e-12 && b.im.abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn hpf_ten_by_ten_zeroes_only_dc() {
        let m = HpfMask::new(10, 10, 0.01).unwrap();
        assert_eq!(m.zero_count(), 1);
        assert!(!m.passes(0, 0));
        assert_eq!((0..10).flat_map(|u| (0..10).map(move |v| (u, v))).filter(|&(u, v)| !m.passes(u, v)).count(), 1);
    }

    #[test]
    fn hpf_fraction_zero_keeps_everything() {
        let m = HpfMask::new(6, 5, 0.0).unwrap();
        assert_eq!(m.zero_count(), 0);
        assert!(m.as_tensor::<f64>().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hpf_rejects_out_of_range_fraction() {
        assert!(matches!(HpfMask::new(4, 4, 1.5), Err(Error::Param(_))));
        assert!(matches!(HpfMask::new(4, 4, -0.1), Err(Error::Param(_))));
    }

    #[test]
    fn hpf_thirty_two_square_picks_lexicographic_ties() {
        let m = HpfMask::new(32, 32, 0.01).unwrap();
        assert_eq!(m.zero_count(), 11);
        let zeroed: Vec<(usize, usize)> = (0..32)
            .flat_map(|u| (0..32).map(move |v| (u, v)))
            .filter(|&(u, v)| !m.passes(u, v))
            .collect();
        // Of the four d=2 entries (0,2), (0,30), (2,0), (30,0) only the first two go.
        assert!(zeroed.contains(&(0, 2)) && zeroed.contains(&(0, 30)));
        assert!(!zeroed.contains(&(2, 0)) && !zeroed.contains(&(30, 0)));
    }

    #[test]
    fn mask_application_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::<f64>::randn(&[1, 2, 8, 8], 1.0, &mut rng);
        let z = fft2(&x).unwrap();
        let m = HpfMask::new(8, 8, 0.1).unwrap();
        let once = m.apply(&z).unwrap();
        assert_eq!(m.apply(&once).unwrap(), once);
    }
}
