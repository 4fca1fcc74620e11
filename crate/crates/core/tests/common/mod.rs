//! Reference computations shared by the integration tests and the acceptance
//! harness. Everything here is built from the brute-force oracles and plain
//! loops, never from the kernels under test.

#![allow(dead_code)]

use famkd::attention::{init_cross_attention, CrossAttnParams};
use famkd::fam::{init_fam, FamParams};
use famkd::oracles::{naive_conv2d, naive_cross_attention, naive_dft2, naive_global_filter, Direction};
use famkd::Tensor;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Coefficients an ideal high-pass of `fraction` removes, recomputed from the
/// definition: the `⌈fraction·H·W⌉` closest to DC under wrap-around distance,
/// ties in `(u, v)` order.
pub fn reference_hpf_zeros(h: usize, w: usize, fraction: f64) -> Vec<(usize, usize)> {
    let count = (fraction * (h * w) as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut all: Vec<(usize, usize, usize)> = Vec::new();
    for u in 0..h {
        for v in 0..w {
            let du = u.min(h - u);
            let dv = v.min(w - v);
            all.push((du * du + dv * dv, u, v));
        }
    }
    all.sort();
    all.into_iter().take(count).map(|(_, u, v)| (u, v)).collect()
}

/// FAM from its definition: DFT per plane, five-loop filtering, mask,
/// inverse DFT, plus the 1×1 convolution branch.
pub fn reference_fam(x: &Tensor<f64>, p: &FamParams<f64>) -> Vec<f64> {
    let (n, c_in, h, w) = x.dims4().unwrap();
    let (c_out, _, _, _) = p.k_re.dims4().unwrap();
    let plane = h * w;
    let mut out = vec![0.0; n * c_out * plane];
    if p.branches.global {
        let mut z = Vec::with_capacity(x.len());
        for s in x.data().chunks(plane) {
            let c: Vec<Complex64> = s.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            z.extend(naive_dft2(&c, h, w, Direction::Forward));
        }
        let k: Vec<Complex64> =
            p.k_re.data().iter().zip(p.k_im.data()).map(|(&a, &b)| Complex64::new(a, b)).collect();
        let mut g = naive_global_filter(&z, (n, c_in, h, w), &k, c_out);
        let zeros = reference_hpf_zeros(h, w, p.hpf.fraction());
        for s in g.chunks_mut(plane) {
            for &(u, v) in &zeros {
                s[u * w + v] = Complex64::new(0.0, 0.0);
            }
        }
        let g1 = p.gamma1.data()[0];
        for (o, s) in out.chunks_mut(plane).zip(g.chunks(plane)) {
            for (a, b) in o.iter_mut().zip(naive_dft2(s, h, w, Direction::Inverse)) {
                *a += g1 * b.re;
            }
        }
    }
    if p.branches.local {
        let conv = naive_conv2d(x.data(), (n, c_in, h, w), p.local_w.data(), (c_out, c_in, 1, 1), 1, 0);
        let g2 = p.gamma2.data()[0];
        for (i, (a, c)) in out.iter_mut().zip(conv).enumerate() {
            let o = (i / plane) % c_out;
            *a += g2 * (c + p.local_b.data()[o]);
        }
    }
    out
}

pub fn reference_mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn reference_fuse(low: &Tensor<f64>, high: &Tensor<f64>, p: &CrossAttnParams<f64>) -> Tensor<f64> {
    let d = p.wq.shape()[1];
    let scale = if p.scaled { 1.0 / (d as f64).sqrt() } else { 1.0 };
    let out = naive_cross_attention(
        low.data(),
        low.dims4().unwrap(),
        high.data(),
        high.dims4().unwrap(),
        p.wq.data(),
        p.wk.data(),
        p.wv.data(),
        d,
        scale,
    );
    Tensor::new(low.shape(), out).unwrap()
}

/// A three-level review problem with random heads.
pub struct ReviewCase {
    pub teacher: Vec<Tensor<f64>>,
    pub student: Vec<Tensor<f64>>,
    pub crossat: Vec<CrossAttnParams<f64>>,
    pub fam: Vec<FamParams<f64>>,
}

pub fn review_case(seed: u64, shapes: &[(usize, usize, usize)], teacher_channels: &[usize]) -> ReviewCase {
    let mut r = rng(seed);
    let m = shapes.len();
    let mut case = ReviewCase { teacher: vec![], student: vec![], crossat: vec![], fam: vec![] };
    for k in 0..m {
        let (c, h, w) = shapes[k];
        let ct = teacher_channels[k];
        case.teacher.push(Tensor::randn(&[2, ct, h, w], 1.0, &mut r));
        case.student.push(Tensor::randn(&[2, c, h, w], 1.0, &mut r));
        let mut f = init_fam::<f64>(ct, c, h, w, 0.05, seed + 10 + k as u64).unwrap();
        f.k_re = Tensor::randn(f.k_re.shape(), 0.3, &mut r);
        f.k_im = Tensor::randn(f.k_im.shape(), 0.3, &mut r);
        f.gamma1 = Tensor::scalar(0.7);
        f.gamma2 = Tensor::scalar(1.3);
        f.local_b = Tensor::randn(f.local_b.shape(), 0.1, &mut r);
        case.fam.push(f);
        if k + 1 < m {
            case.crossat.push(init_cross_attention::<f64>(c, shapes[k + 1].0, 4, true, seed + 20 + k as u64).unwrap());
        }
    }
    case
}

/// The three-level review loss written out term by term:
/// `D(T₂, F₂(S₂)) + D(T₁, F₁(u₁(S₁, S₂))) + D(T₀, F₀(u₀(S₀, u₁(S₁, S₂))))`.
pub fn hand_expanded_review(c: &ReviewCase) -> f64 {
    assert_eq!(c.student.len(), 3);
    let fused1 = reference_fuse(&c.student[1], &c.student[2], &c.crossat[1]);
    let fused0 = reference_fuse(&c.student[0], &fused1, &c.crossat[0]);
    let term2 = reference_mse(c.teacher[2].data(), &reference_fam(&c.student[2], &c.fam[2]));
    let term1 = reference_mse(c.teacher[1].data(), &reference_fam(&fused1, &c.fam[1]));
    let term0 = reference_mse(c.teacher[0].data(), &reference_fam(&fused0, &c.fam[0]));
    term2 + term1 + term0
}
