//! Frequency attention module: a learnable complex global filter applied in
//! the Fourier domain followed by a high-pass mask (global branch), a 1×1
//! convolution (local branch), and a learnable weighted sum of the two.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::NamedParams;
use crate::scalar::Scalar;
use crate::spectral::HpfMask;
use crate::tape::{Tape, Var};
use crate::tensor::{ComplexTensor, Tensor};

/// Standard deviation of the real and imaginary parts of a fresh filter.
pub const FILTER_INIT_STD: f64 = 0.02;

/// Element-wise product of the spectrum with each output kernel, summed over
/// input channels: `out[n, o] = Σ_c spectrum[n, c] ⊙ filter[o, c]`.
pub fn apply_global_filter<T: Scalar>(
    spectrum: &ComplexTensor<T>,
    filter: &ComplexTensor<T>,
) -> Result<ComplexTensor<T>> {
    let (n, c_in, h, w) = spectrum.dims4()?;
    let (c_out, k_in, kh, kw) = filter.dims4()?;
    if (k_in, kh, kw) != (c_in, h, w) {
        return Err(Error::shape("apply_global_filter", spectrum.shape(), filter.shape()));
    }
    let plane = h * w;
    let mut out = ComplexTensor::zeros(&[n, c_out, h, w]);
    let z = spectrum.data();
    let k = filter.data();
    for (img, out_img) in out.data_mut().chunks_mut(c_out * plane).enumerate() {
        for (o, acc) in out_img.chunks_mut(plane).enumerate() {
            for c in 0..c_in {
                let zs = &z[(img * c_in + c) * plane..][..plane];
                let ks = &k[(o * c_in + c) * plane..][..plane];
                for ((a, &x), &f) in acc.iter_mut().zip(zs).zip(ks) {
                    *a += x * f;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`apply_global_filter`] under the `∂/∂re + i·∂/∂im`
/// convention: `dz = Σ_o g·conj(k)`, `dk = Σ_n g·conj(z)`.
pub(crate) fn global_filter_backward<T: Scalar>(
    spectrum: &ComplexTensor<T>,
    filter: &ComplexTensor<T>,
    grad: &ComplexTensor<T>,
    need_spectrum: bool,
    need_filter: bool,
) -> (Option<ComplexTensor<T>>, Option<ComplexTensor<T>>) {
    let (n, c_in, h, w) = spectrum.dims4().expect("validated in forward");
    let c_out = filter.shape()[0];
    let plane = h * w;
    let (z, k, g) = (spectrum.data(), filter.data(), grad.data());
    let dz = need_spectrum.then(|| {
        let mut dz = ComplexTensor::zeros(spectrum.shape());
        for img in 0..n {
            for c in 0..c_in {
                let acc = &mut dz.data_mut()[(img * c_in + c) * plane..][..plane];
                for o in 0..c_out {
                    let gs = &g[(img * c_out + o) * plane..][..plane];
                    let ks = &k[(o * c_in + c) * plane..][..plane];
                    for ((a, &gv), &kv) in acc.iter_mut().zip(gs).zip(ks) {
                        *a += gv * kv.conj();
                    }
                }
            }
        }
        dz
    });
    let dk = need_filter.then(|| {
        let mut dk = ComplexTensor::zeros(filter.shape());
        for o in 0..c_out {
            for c in 0..c_in {
                let acc = &mut dk.data_mut()[(o * c_in + c) * plane..][..plane];
                for img in 0..n {
                    let gs = &g[(img * c_out + o) * plane..][..plane];
                    let zs = &z[(img * c_in + c) * plane..][..plane];
                    for ((a, &gv), &zv) in acc.iter_mut().zip(gs).zip(zs) {
                        *a += gv * zv.conj();
                    }
                }
            }
        }
        dk
    });
    (dz, dk)
}

/// Which FAM branches contribute to the output. Both are on by default;
/// disabling one reproduces the global-only / local-only ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branches {
    pub global: bool,
    pub local: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            global: true,
            local: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamParams<T> {
    /// Real part of the global filter, `(C_out, C_in, H, W)`.
    pub k_re: Tensor<T>,
    /// Imaginary part of the global filter.
    pub k_im: Tensor<T>,
    pub gamma1: Tensor<T>,
    pub gamma2: Tensor<T>,
    /// 1×1 convolution kernel `(C_out, C_in, 1, 1)`.
    pub local_w: Tensor<T>,
    pub local_b: Tensor<T>,
    pub hpf: HpfMask,
    pub branches: Branches,
}

impl<T: Scalar> FamParams<T> {
    /// `(C_out, C_in, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.k_re.dims4().expect("filter is rank 4")
    }

    pub fn filter(&self) -> ComplexTensor<T> {
        ComplexTensor::from_parts(&self.k_re, &self.k_im).expect("filter parts share a shape")
    }

    /// Reassemble parameters from tensors, validating every shape.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        k_re: Tensor<T>,
        k_im: Tensor<T>,
        gamma1: Tensor<T>,
        gamma2: Tensor<T>,
        local_w: Tensor<T>,
        local_b: Tensor<T>,
        hpf_fraction: f64,
    ) -> Result<Self> {
        let (c_out, c_in, h, w) = k_re.dims4()?;
        if k_im.shape() != k_re.shape() {
            return Err(Error::shape("fam filter", k_re.shape(), k_im.shape()));
        }
        if local_w.shape() != [c_out, c_in, 1, 1] {
            return Err(Error::shape("fam local kernel", local_w.shape(), &[c_out, c_in, 1, 1]));
        }
        if local_b.len() != c_out || gamma1.len() != 1 || gamma2.len() != 1 {
            return Err(Error::shape("fam scalars", local_b.shape(), &[c_out]));
        }
        if !(gamma1.is_finite() && gamma2.is_finite()) {
            return Err(Error::Param("fam branch weights must be finite".into()));
        }
        Ok(Self {
            k_re,
            k_im,
            gamma1,
            gamma2,
            local_w,
            local_b,
            hpf: HpfMask::new(h, w, hpf_fraction)?,
            branches: Branches::default(),
        })
    }
}

impl<T: Scalar> NamedParams<T> for FamParams<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("K.re", &self.k_re);
        f("K.im", &self.k_im);
        f("gamma1", &self.gamma1);
        f("gamma2", &self.gamma2);
        f("local.w", &self.local_w);
        f("local.b", &self.local_b);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("K.re", &mut self.k_re);
        f("K.im", &mut self.k_im);
        f("gamma1", &mut self.gamma1);
        f("gamma2", &mut self.gamma2);
        f("local.w", &mut self.local_w);
        f("local.b", &mut self.local_b);
    }
}

/// Fresh FAM parameters: filter entries `N(0, 0.02²)` in both parts, both
/// branch weights 1, fan-in uniform 1×1 kernel with zero bias.
pub fn init_fam<T: Scalar>(
    c_out: usize,
    c_in: usize,
    h: usize,
    w: usize,
    hpf_fraction: f64,
    seed: u64,
) -> Result<FamParams<T>> {
    if c_out == 0 || c_in == 0 || h == 0 || w == 0 {
        return Err(Error::Param(format!("fam dims ({c_out}, {c_in}, {h}, {w}) must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [c_out, c_in, h, w];
    let k_re = Tensor::randn(&shape, FILTER_INIT_STD, &mut rng);
    let k_im = Tensor::randn(&shape, FILTER_INIT_STD, &mut rng);
    let local_w = Tensor::rand_uniform(&[c_out, c_in, 1, 1], 1.0 / (c_in as f64).sqrt(), &mut rng);
    FamParams::from_parts(
        k_re,
        k_im,
        Tensor::scalar(T::one()),
        Tensor::scalar(T::one()),
        local_w,
        Tensor::zeros(&[c_out]),
        hpf_fraction,
    )
}

/// Records the FAM forward pass on `tape`. Parameters become named leaves
/// `<name>.K.re`, `<name>.K.im`, `<name>.gamma1`, … so their gradients can be
/// looked up by name after backward.
pub fn fam_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, params: &FamParams<T>, name: &str) -> Result<Var> {
    let (c_out, c_in, h, w) = params.dims();
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 4 || xs[1] != c_in || xs[2] != h || xs[3] != w {
        return Err(Error::shape("fam_forward", &xs, &[c_out, c_in, h, w]));
    }
    let mut bound = Vec::new();
    params.visit_params(&mut |field, t| bound.push((field.to_string(), t.clone())));
    let leaf = |tape: &mut Tape<T>, field: &str| -> Result<Var> {
        let (_, t) = bound.iter().find(|(f, _)| f == field).expect("known field");
        tape.param(format!("{name}.{field}"), t.clone())
    };
    let global = if params.branches.global {
        let k_re = leaf(tape, "K.re")?;
        let k_im = leaf(tape, "K.im")?;
        let gamma1 = leaf(tape, "gamma1")?;
        let spectrum = tape.fft2(x)?;
        let filter = tape.complex(k_re, k_im)?;
        let filtered = tape.global_filter(spectrum, filter)?;
        let masked = tape.high_pass(filtered, &params.hpf)?;
        let spatial = tape.ifft2(masked)?;
        let real = tape.real_part(spatial)?;
        Some(tape.scale(real, gamma1)?)
    } else {
        None
    };
    let local = if params.branches.local {
        let lw = leaf(tape, "local.w")?;
        let lb = leaf(tape, "local.b")?;
        let gamma2 = leaf(tape, "gamma2")?;
        let conv = tape.conv2d(x, lw, 1, 0)?;
        let biased = tape.channel_bias(conv, lb)?;
        Some(tape.scale(biased, gamma2)?)
    } else {
        None
    };
    match (global, local) {
        (Some(g), Some(l)) => tape.add(g, l),
        (Some(g), None) => Ok(g),
        (None, Some(l)) => Ok(l),
        (None, None) => Err(Error::Param("fam needs at least one branch".into())),
    }
}

/// Tape-free FAM evaluation.
pub fn fam_apply<T: Scalar>(x: &Tensor<T>, params: &FamParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = fam_forward(&mut tape, xv, params, "fam")?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{fft2, ifft2};
    use rand::SeedableRng;

    fn random_complex(shape: &[usize], seed: u64) -> ComplexTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let re = Tensor::randn(shape, 1.0, &mut rng);
        let im = Tensor::randn(shape, 1.0, &mut rng);
        ComplexTensor::from_parts(&re, &im).unwrap()
    }

    #[test]
    fn all_ones_filter_is_identity() {
        let z = random_complex(&[2, 1, 4, 4], 1);
        let k = ComplexTensor::from_real(&Tensor::ones(&[1, 1, 4, 4]));
        assert_eq!(apply_global_filter(&z, &k).unwrap(), z);
    }

    #[test]
    fn zero_filter_gives_zero() {
        let z = random_complex(&[1, 3, 4, 4], 2);
        let k = ComplexTensor::zeros(&[2, 3, 4, 4]);
        let out = apply_global_filter(&z, &k).unwrap();
        assert_eq!(out.shape(), &[1, 2, 4, 4]);
        assert!(out.data().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn filter_shape_mismatch_is_rejected() {
        let z = random_complex(&[1, 3, 4, 4], 3);
        let k = ComplexTensor::zeros(&[2, 2, 4, 4]);
        assert!(matches!(apply_global_filter(&z, &k), Err(Error::Shape { .. })));
    }

    fn identity_local(c: usize, hpf: f64) -> FamParams<f64> {
        let mut p = init_fam::<f64>(c, c, 4, 4, hpf, 0).unwrap();
        p.local_w = Tensor::eye(c).reshape(&[c, c, 1, 1]).unwrap();
        p
    }

    #[test]
    fn local_only_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let mut p = identity_local(3, 0.01);
        p.gamma1 = Tensor::scalar(0.0);
        let y = fam_apply(&x, &p).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn global_only_identity_with_unit_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[1, 1, 4, 4], 1.0, &mut rng);
        let mut p = init_fam::<f64>(1, 1, 4, 4, 0.0, 0).unwrap();
        p.k_re = Tensor::ones(&[1, 1, 4, 4]);
        p.k_im = Tensor::zeros(&[1, 1, 4, 4]);
        p.gamma2 = Tensor::scalar(0.0);
        let y = fam_apply(&x, &p).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn full_suppression_zeroes_global_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let mut p = init_fam::<f64>(3, 2, 4, 4, 1.0, 0).unwrap();
        p.branches.local = false;
        let y = fam_apply(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaling_filter_scales_global_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let mut p = init_fam::<f64>(3, 2, 4, 4, 0.01, 11).unwrap();
        p.branches.local = false;
        let base = fam_apply(&x, &p).unwrap();
        let s = -2.5;
        p.k_re = p.k_re.scale(s);
        p.k_im = p.k_im.scale(s);
        let scaled = fam_apply(&x, &p).unwrap();
        let tol = 1e-6 * base.max_abs();
        for (a, b) in base.data().iter().zip(scaled.data()) {
            assert!((a * s - b).abs() <= tol);
        }
    }

    #[test]
    fn unit_filter_with_one_input_channel_is_hpf_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::randn(&[1, 1, 8, 8], 1.0, &mut rng);
        let mut p = init_fam::<f64>(2, 1, 8, 8, 0.05, 0).unwrap();
        p.k_re = Tensor::ones(&[2, 1, 8, 8]);
        p.k_im = Tensor::zeros(&[2, 1, 8, 8]);
        p.branches.local = false;
        let y = fam_apply(&x, &p).unwrap();
        let want = ifft2(&p.hpf.apply(&fft2(&x).unwrap()).unwrap()).unwrap().re();
        for o in 0..2 {
            for (a, b) in y.plane(0, o).iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_is_deterministic_with_unit_gammas() {
        let a = init_fam::<f32>(4, 3, 5, 5, 0.01, 42).unwrap();
        let b = init_fam::<f32>(4, 3, 5, 5, 0.01, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.gamma1.data(), &[1.0]);
        assert_eq!(a.gamma2.data(), &[1.0]);
        assert!(a.local_b.data().iter().all(|&v| v == 0.0));
        assert_ne!(a, init_fam::<f32>(4, 3, 5, 5, 0.01, 43).unwrap());
    }

    #[test]
    fn init_filter_spread_matches_requested_std() {
        let p = init_fam::<f64>(64, 64, 8, 8, 0.01, 3).unwrap();
        for part in [&p.k_re, &p.k_im] {
            let n = part.len() as f64;
            let mean = part.sum() / n;
            let sd = (part.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!((0.018..=0.022).contains(&sd), "sd {sd}");
        }
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(matches!(init_fam::<f32>(0, 1, 2, 2, 0.01, 0), Err(Error::Param(_))));
    }
}
