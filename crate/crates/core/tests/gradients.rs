mod common;

use common::rng;
use famkd::model::{ArchDescriptor, StagedModel};
use famkd::ops::Mode;
use famkd::optim::Sgd;
use famkd::selftest;
use famkd::{Tape, Tensor};

const SEEDS: [u64; 3] = [100, 101, 102];

#[test]
fn fam_gradients() {
    let r = selftest::fam_grad_suite(&SEEDS).unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn attention_gradients() {
    for r in [
        selftest::local_attention_grad_suite(&SEEDS).unwrap(),
        selftest::cross_attention_grad_suite(&SEEDS).unwrap(),
    ] {
        assert!(r.pass, "{r:?}");
    }
}

#[test]
fn feature_loss_gradients() {
    for r in [
        selftest::layer_to_layer_grad_suite(&SEEDS).unwrap(),
        selftest::review_grad_suite(&SEEDS).unwrap(),
    ] {
        assert!(r.pass, "{r:?}");
    }
}

fn model_loss(model: &StagedModel<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = model.forward_on_tape(&mut tape, xv, Mode::Train, false).unwrap();
    let loss = tape.cross_entropy(out.logits, labels).unwrap();
    tape.value(loss).data()[0]
}

#[test]
fn resnet_backward_matches_central_differences() {
    let arch = ArchDescriptor::new(8, 1, 5).unwrap();
    let model = StagedModel::<f64>::build(arch, 3);
    let mut r = rng(8);
    let x = Tensor::randn(&[2, 3, 32, 32], 1.0, &mut r);
    let labels = [1, 4];

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = model.forward_on_tape(&mut tape, xv, Mode::Train, true).unwrap();
    let loss = tape.cross_entropy(out.logits, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();

    let probes = [
        ("model.stem.conv.w", 7),
        ("model.stage0.block0.conv1.w", 100),
        ("model.stage1.block0.shortcut.conv.w", 3),
        ("model.stage2.block0.bn2.gamma", 5),
        ("model.stage2.block0.conv2.w", 2000),
        ("model.fc.w", 11),
        ("model.fc.b", 4),
    ];
    let h = 1e-5;
    for (name, i) in probes {
        let analytic = grads.named(name).unwrap_or_else(|| panic!("no gradient for {name}")).data()[i];
        let at = |delta: f64| {
            let mut t = model.tensors().clone();
            t.get_mut(name).unwrap().data_mut()[i] += delta;
            model_loss(&StagedModel::from_tensors(t).unwrap(), &x, &labels)
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let err = (analytic - numeric).abs() / numeric.abs().max(1e-6);
        assert!(err < 1e-4, "{name}[{i}]: analytic {analytic} vs numeric {numeric}");
    }
}

#[test]
fn sgd_follows_scalar_recurrence_on_quadratic() {
    // f(p) = a/2·(p − c)², so g = a(p − c).
    let (a, c, lr, mu, wd) = (3.0, 0.5, 0.1, 0.9, 0.01);
    let mut sgd = Sgd::<f64>::new(mu, wd).unwrap();
    let mut p = Tensor::scalar(2.0);
    let (mut pr, mut vr) = (2.0f64, 0.0f64);
    for _ in 0..3 {
        let g = Tensor::scalar(a * (p.data()[0] - c));
        sgd.step("p", &mut p, &g, lr).unwrap();
        vr = mu * vr + (a * (pr - c) + wd * pr);
        pr -= lr * vr;
        assert!((p.data()[0] - pr).abs() <= 1e-10);
    }
}
