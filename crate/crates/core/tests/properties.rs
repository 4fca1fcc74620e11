use std::collections::BTreeMap;

use famkd::checkpoint::{from_bytes, to_bytes};
use famkd::data::{crop_flip, denormalize, normalize, PAD};
use famkd::spectral::{build_hpf_mask, fft2, ifft2};
use famkd::trainer::{moving_average, topk_hits};
use famkd::Tensor;
use proptest::prelude::*;

fn plane(max: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(-10.0f64..10.0, h * w)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fft_round_trip((h, w, v) in plane(13)) {
        let x = Tensor::new(&[1, 1, h, w], v).unwrap();
        let back = ifft2(&fft2(&x).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert!((a.re - b).abs() < 1e-9 && a.im.abs() < 1e-9);
        }
    }

    #[test]
    fn parseval((h, w, v) in plane(16)) {
        let x = Tensor::new(&[1, 1, h, w], v).unwrap();
        let energy: f64 = x.data().iter().map(|a| a * a).sum();
        let spectral: f64 = fft2(&x).unwrap().data().iter().map(|z| z.norm_sqr()).sum::<f64>() / (h * w) as f64;
        prop_assert!((energy - spectral).abs() <= 1e-8 * energy.max(1e-300));
    }

    #[test]
    fn hpf_count_is_ceiling(h in 1usize..40, w in 1usize..40, pct in 0u32..=100) {
        let frac = pct as f64 / 100.0;
        let mask = build_hpf_mask(h, w, frac).unwrap();
        let exact = (pct as usize * h * w).div_ceil(100);
        prop_assert_eq!(mask.zero_count(), exact);
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        entries in prop::collection::btree_map("[a-z]{1,6}(\\.[a-z0-9]{1,4}){0,2}", prop::collection::vec(-1e6f32..1e6, 0..20), 0..6)
    ) {
        let table: BTreeMap<String, Tensor<f32>> =
            entries.into_iter().map(|(k, v)| { let n = v.len(); (k, Tensor::new(&[n], v).unwrap()) }).collect();
        let bytes = to_bytes(&table).unwrap();
        let back = from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &table);
        prop_assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn normalization_inverts(c in 0usize..3, byte in any::<u8>()) {
        prop_assert_eq!(denormalize(c, normalize(c, byte)), byte);
    }

    #[test]
    fn centered_crop_without_flip_is_identity(v in prop::collection::vec(any::<u8>(), 2 * 5 * 6)) {
        prop_assert_eq!(crop_flip(&v, 2, 5, 6, PAD, PAD, false), v);
    }

    #[test]
    fn flipping_twice_is_identity(v in prop::collection::vec(any::<u8>(), 3 * 6 * 7)) {
        let once = crop_flip(&v, 3, 6, 7, PAD, PAD, true);
        prop_assert_eq!(crop_flip(&once, 3, 6, 7, PAD, PAD, true), v);
    }

    #[test]
    fn top5_contains_top1(logits in prop::collection::vec(-3.0f32..3.0, 4 * 12), labels in prop::collection::vec(0usize..12, 4)) {
        let t = Tensor::new(&[4, 12], logits).unwrap();
        let (h1, h5) = topk_hits(&t, &labels);
        prop_assert!(h1 <= h5 && h5 <= 4);
    }

    #[test]
    fn smoothing_preserves_strict_decrease(steps in prop::collection::vec(0.001f64..1.0, 60..120), w in 1usize..50) {
        let mut acc = 100.0;
        let xs: Vec<f64> = steps.iter().map(|d| { acc -= d; acc }).collect();
        let sm = moving_average(&xs, w);
        prop_assert_eq!(sm.len(), xs.len() - w + 1);
        prop_assert!(sm.windows(2).all(|p| p[1] < p[0]));
    }
}
