mod common;

use common::{reference_fam, reference_hpf_zeros, rng};
use famkd::fam::{fam_apply, init_fam, Branches};
use famkd::oracles::rel_err;
use famkd::selftest;
use famkd::spectral::build_hpf_mask;
use famkd::Tensor;

#[test]
fn fft_against_direct_sum() {
    let r = selftest::fft_suite(20, 42).unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn filter_conv_and_attention_against_loops() {
    let seeds = [1, 2, 3];
    for r in [
        selftest::global_filter_suite(&seeds).unwrap(),
        selftest::conv2d_suite(&seeds).unwrap(),
        selftest::local_attention_suite(&seeds).unwrap(),
        selftest::cross_attention_suite(&seeds).unwrap(),
    ] {
        assert!(r.pass, "{r:?}");
    }
}

#[test]
fn fam_against_definition() {
    for (seed, (c_out, c_in, h, w)) in [(2, 3, 5, 4), (1, 1, 8, 8), (4, 2, 6, 7)].into_iter().enumerate() {
        let mut r = rng(seed as u64);
        let x = Tensor::<f64>::randn(&[2, c_in, h, w], 1.0, &mut r);
        let mut p = init_fam::<f64>(c_out, c_in, h, w, 0.1, seed as u64).unwrap();
        p.k_re = Tensor::randn(p.k_re.shape(), 0.5, &mut r);
        p.k_im = Tensor::randn(p.k_im.shape(), 0.5, &mut r);
        p.gamma1 = Tensor::scalar(-0.4);
        p.local_b = Tensor::randn(p.local_b.shape(), 1.0, &mut r);
        for branches in [
            Branches { global: true, local: true },
            Branches { global: true, local: false },
            Branches { global: false, local: true },
        ] {
            p.branches = branches;
            let got = fam_apply(&x, &p).unwrap();
            let err = rel_err(got.data(), &reference_fam(&x, &p));
            assert!(err <= 1e-10, "{branches:?}: {err}");
        }
    }
}

#[test]
fn hpf_zero_sets_match_definition() {
    for (h, w) in [(8, 8), (10, 10), (16, 16), (32, 32), (7, 12), (3, 5)] {
        for frac in [0.01, 0.05, 0.2] {
            let mask = build_hpf_mask(h, w, frac).unwrap();
            let mut zeros: Vec<_> =
                (0..h).flat_map(|u| (0..w).map(move |v| (u, v))).filter(|&(u, v)| !mask.passes(u, v)).collect();
            let mut want = reference_hpf_zeros(h, w, frac);
            zeros.sort();
            want.sort();
            assert_eq!(zeros, want, "{h}x{w} at {frac}");
        }
    }
}

#[test]
fn hpf_counts_at_one_percent() {
    for (h, w, want) in [(8, 8, 1), (10, 10, 1), (16, 16, 3), (32, 32, 11)] {
        assert_eq!(build_hpf_mask(h, w, 0.01).unwrap().zero_count(), want, "{h}x{w}");
    }
}
