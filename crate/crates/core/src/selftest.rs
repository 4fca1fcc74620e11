//! Kernel-versus-oracle suites. Each suite returns one [`OracleReport`];
//! [`run_all`] is what the `selftest` command prints.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    cross_attention_fuse, init_cross_attention, init_local_attention, local_self_attention, CrossAttnParams,
    LocalAttnParams,
};
use crate::distill::{layer_to_layer_loss, review_loss};
use crate::error::{Error, Result};
use crate::fam::{apply_global_filter, fam_forward, init_fam, FamParams};
use crate::ops::conv2d;
use crate::oracles::{
    finite_diff_grad, naive_conv2d, naive_cross_attention, naive_dft2, naive_global_filter, naive_local_attention,
    rel_err, rel_err_complex, Direction, OracleReport,
};
use crate::params::NamedParams;
use crate::spectral::{fft2, fft2_complex, ifft2};
use crate::tape::{Tape, Var};
use crate::tensor::{ComplexTensor, Tensor};

pub const FFT_TOL: f64 = 1e-10;
pub const KERNEL_TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn complex_of(re: &Tensor<f64>, im: &Tensor<f64>) -> Vec<Complex64> {
    re.data().iter().zip(im.data()).map(|(&a, &b)| Complex64::new(a, b)).collect()
}

/// Forward and inverse transforms of random real and complex slices of sizes
/// 2..=16 (odd included) against the direct double sum.
pub fn fft_suite(slices: usize, seed: u64) -> Result<OracleReport> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..slices {
        let h = r.random_range(2..=16);
        let w = r.random_range(2..=16);
        let re = Tensor::<f64>::randn(&[1, 1, h, w], 1.0, &mut r);
        let im = Tensor::<f64>::randn(&[1, 1, h, w], 1.0, &mut r);
        let real_in: Vec<Complex64> = re.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
        worst = worst.max(rel_err_complex(fft2(&re)?.data(), &naive_dft2(&real_in, h, w, Direction::Forward)));
        let z = ComplexTensor::from_parts(&re, &im)?;
        let zc = complex_of(&re, &im);
        worst = worst.max(rel_err_complex(fft2_complex(&z)?.data(), &naive_dft2(&zc, h, w, Direction::Forward)));
        worst = worst.max(rel_err_complex(ifft2(&z)?.data(), &naive_dft2(&zc, h, w, Direction::Inverse)));
    }
    Ok(OracleReport::new("fft2_ifft2_vs_naive_dft2", worst, FFT_TOL, vec![seed]))
}

pub fn global_filter_suite(seeds: &[u64]) -> Result<OracleReport> {
    let mut worst = 0.0f64;
    for &s in seeds {
        let mut r = rng(s);
        let (n, ci, co, h, w) = (2, r.random_range(1..=4), r.random_range(1..=4), r.random_range(2..=8), r.random_range(2..=8));
        let zre = Tensor::<f64>::randn(&[n, ci, h, w], 1.0, &mut r);
        let zim = Tensor::<f64>::randn(&[n, ci, h, w], 1.0, &mut r);
        let kre = Tensor::<f64>::randn(&[co, ci, h, w], 1.0, &mut r);
        let kim = Tensor::<f64>::randn(&[co, ci, h, w], 1.0, &mut r);
        let got = apply_global_filter(&ComplexTensor::from_parts(&zre, &zim)?, &ComplexTensor::from_parts(&kre, &kim)?)?;
        let want = naive_global_filter(&complex_of(&zre, &zim), (n, ci, h, w), &complex_of(&kre, &kim), co);
        worst = worst.max(rel_err_complex(got.data(), &want));
    }
    Ok(OracleReport::new("apply_global_filter_vs_naive", worst, KERNEL_TOL, seeds.to_vec()))
}

pub fn conv2d_suite(seeds: &[u64]) -> Result<OracleReport> {
    let mut worst = 0.0f64;
    for &s in seeds {
        let mut r = rng(s);
        let k = [1usize, 3][r.random_range(0..2)];
        let stride = r.random_range(1..=2);
        let pad = if k == 3 { r.random_range(0..=1) } else { 0 };
        let dims = (2, r.random_range(1..=4), r.random_range(3..=9), r.random_range(3..=9));
        let kdims = (r.random_range(1..=5), dims.1, k, k);
        let x = Tensor::<f64>::randn(&[dims.0, dims.1, dims.2, dims.3], 1.0, &mut r);
        let kern = Tensor::<f64>::randn(&[kdims.0, kdims.1, k, k], 1.0, &mut r);
        let got = conv2d(&x, &kern, stride, pad)?;
        worst = worst.max(rel_err(got.data(), &naive_conv2d(x.data(), dims, kern.data(), kdims, stride, pad)));
    }
    Ok(OracleReport::new("conv2d_vs_naive", worst, KERNEL_TOL, seeds.to_vec()))
}

pub fn local_attention_suite(seeds: &[u64]) -> Result<OracleReport> {
    let mut worst = 0.0f64;
    for &s in seeds {
        let mut r = rng(s);
        let c = r.random_range(1..=3);
        let (h, w) = (r.random_range(3..=6), r.random_range(3..=6));
        let window = [1usize, 3][r.random_range(0..2)];
        let x = Tensor::<f64>::randn(&[1, c, h, w], 1.0, &mut r);
        let mut p = init_local_attention::<f64>(c, window, s)?;
        p.rel = Tensor::randn(p.rel.shape(), 0.5, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = local_self_attention(&mut tape, xv, &p, "la")?;
        let want = naive_local_attention(x.data(), (1, c, h, w), p.wq.data(), p.wk.data(), p.wv.data(), p.rel.data(), window);
        worst = worst.max(rel_err(tape.value(y).data(), &want));
    }
    Ok(OracleReport::new("local_self_attention_vs_naive", worst, KERNEL_TOL, seeds.to_vec()))
}

pub fn cross_attention_suite(seeds: &[u64]) -> Result<OracleReport> {
    let mut worst = 0.0f64;
    for &s in seeds {
        let mut r = rng(s);
        let (c_lo, c_hi, d) = (r.random_range(1..=4), r.random_range(1..=5), r.random_range(1..=4));
        let (h, w) = (r.random_range(1..=5), r.random_range(1..=5));
        let (hh, hw) = (r.random_range(1..=5), r.random_range(1..=5));
        let scaled = r.random_bool(0.5);
        let low = Tensor::<f64>::randn(&[2, c_lo, h, w], 1.0, &mut r);
        let high = Tensor::<f64>::randn(&[2, c_hi, hh, hw], 1.0, &mut r);
        let p = init_cross_attention::<f64>(c_lo, c_hi, d, scaled, s)?;
        let mut tape = Tape::new();
        let lv = tape.constant(low.clone());
        let hv = tape.constant(high.clone());
        let y = cross_attention_fuse(&mut tape, lv, hv, &p, "u")?;
        let scale = if scaled { 1.0 / (d as f64).sqrt() } else { 1.0 };
        let want = naive_cross_attention(
            low.data(),
            (2, c_lo, h, w),
            high.data(),
            (2, c_hi, hh, hw),
            p.wq.data(),
            p.wk.data(),
            p.wv.data(),
            d,
            scale,
        );
        worst = worst.max(rel_err(tape.value(y).data(), &want));
    }
    Ok(OracleReport::new("cross_attention_fuse_vs_naive", worst, KERNEL_TOL, seeds.to_vec()))
}

/// Named inputs of a differentiable scalar function.
pub type Inputs = BTreeMap<String, Tensor<f64>>;

/// Compares tape gradients of `build` with central differences, for every
/// input in `inputs`. `build` must register each input on the tape under its
/// map key (directly via [`Tape::param`] or through a module's naming) and
/// return a one-element node. Returns the worst per-input relative error.
pub fn grad_check(inputs: &Inputs, build: impl Fn(&mut Tape<f64>, &Inputs) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let out = build(&mut tape, inputs)?;
    let grads = tape.backward(out)?;
    let names: Vec<&String> = inputs.keys().collect();
    let mut flat = Vec::new();
    for n in &names {
        flat.extend_from_slice(inputs[*n].data());
    }
    let unflatten = |v: &[f64]| -> Inputs {
        let mut off = 0;
        let mut m = BTreeMap::new();
        for n in &names {
            let t = &inputs[*n];
            m.insert((*n).clone(), Tensor::new(t.shape(), v[off..off + t.len()].to_vec()).expect("same size"));
            off += t.len();
        }
        m
    };
    let numeric = finite_diff_grad(
        |v| {
            let mut tape = Tape::new();
            match build(&mut tape, &unflatten(v)) {
                Ok(o) => tape.value(o).data()[0],
                Err(_) => f64::NAN,
            }
        },
        &flat,
        FD_STEP,
    )?;
    let mut worst = 0.0f64;
    let mut off = 0;
    for n in &names {
        let len = inputs[*n].len();
        let expected = &numeric[off..off + len];
        off += len;
        let analytic = match grads.named(n) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; len],
        };
        let scale = expected.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = analytic.iter().zip(expected).fold(0.0f64, |m, (a, e)| m.max((a - e).abs()));
        // Inputs whose true gradient is ~0 are compared absolutely.
        let err = if scale < 1e-8 { diff } else { diff / scale };
        if !err.is_finite() {
            return Err(Error::Oracle(format!("non-finite gradient for '{n}'")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Copies `<prefix>.<field>` entries of `inputs` into `p`.
pub fn load_named<P: NamedParams<f64>>(p: &mut P, prefix: &str, inputs: &Inputs) {
    p.visit_params_mut(&mut |field, t| {
        if let Some(v) = inputs.get(&format!("{prefix}.{field}")) {
            *t = v.clone();
        }
    });
}

fn export<P: NamedParams<f64>>(p: &P, prefix: &str, inputs: &mut Inputs) {
    p.export(prefix, inputs);
}

fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed ^ 0x5eed))
}

/// FAM with both branches: gradient w.r.t. the input, both filter parts,
/// both branch weights and the 1×1 kernel and bias.
pub fn fam_grad_suite(seeds: &[u64]) -> Result<OracleReport> {
    let mut worst = 0.0f64;
    for &s in seeds {
        let mut r = rng(s);
        let (c_in, c_out) = (r.random_range(1..=3), r.random_range(1..=3));
        let mut fam = init_fam::<f64>(c_out, c_in, 4, 4, 0.1, s)?;
        fam.k_re = Tensor::randn(fam.k_re.shape(), 0.5, &mut r);
        fam.k_im = Tensor::randn(fam.k_im.shape(), 0.5, &mut r);
        fam.gamma1 = Tensor::scalar(r.random_range(0.5..1.5));
        fam.gamma2 = Tensor::scalar(r.random_range(0.5..1.5));
        fam.local_b = Tensor::randn(&[c_out], 0.5, &mut r);
        let mut inputs = Inputs::new();
        inputs.insert("x".into(), Tensor::randn(&[1, c_in, 4, 4], 1.0, &mut r));
        export(&fam, "fam", &mut inputs);
        let proj = projection(&[1, c_out, 4, 4], s);
        let err = grad_check(&inputs, |tape, m| {
            let mut p = fam.clone();
            load_named(&mut p, "fam", m);
            let x = tape.param("x", m["x"].clone())?;
            let y = fam_forward(tape, x, &p, "fam")?;
            tape.dot(y, &proj)
        })?;
        worst = worst.max(err);
    }
    Ok(OracleReport::new("grad_fam_forward", worst, GRAD_TOL, seeds.to_vec()))
}

pub fn local_attention_grad_suite(seeds: &[u64]) -> Result<OracleReport> {
    let mut worst = 0.0f64;
    for &s in seeds {
        let mut r = rng(s);
        let c = r.random_range(1..=3);
        let window = [1usize, 3][r.random_range(0..2)];
        let mut la = init_local_attention::<f64>(c, window, s)?;
        la.rel = Tensor::randn(la.rel.shape(), 0.5, &mut r);
        let mut inputs = Inputs::new();
        inputs.insert("x".into(), Tensor::randn(&[1, c, 4, 4], 1.0, &mut r));
        export(&la, "la", &mut inputs);
        let proj = projection(&[1, c, 4, 4], s);
        let err = grad_check(&inputs, |tape, m| {
            let mut p = la.clone();
            load_named(&mut p, "la", m);
            let x = tape.param("x", m["x"].clone())?;
            let y = local_self_attention(tape, x, &p, "la")?;
            tape.dot(y, &proj)
        })?;
        worst = worst.max(err);
    }
    Ok(OracleReport::new("grad_local_self_attention", worst, GRAD_TOL, seeds.to_vec()))
}

pub fn cross_attention_grad_suite(seeds: &[u64]) -> Result<OracleReport> {
    let mut worst = 0.0f64;
    for &s in seeds {
        let mut r = rng(s);
        let (c_lo, c_hi, d) = (r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=4));
        let ca = init_cross_attention::<f64>(c_lo, c_hi, d, true, s)?;
        let mut inputs = Inputs::new();
        inputs.insert("low".into(), Tensor::randn(&[1, c_lo, 4, 4], 1.0, &mut r));
        inputs.insert("high".into(), Tensor::randn(&[1, c_hi, 2, 2], 1.0, &mut r));
        export(&ca, "u", &mut inputs);
        let proj = projection(&[1, c_lo, 4, 4], s);
        let err = grad_check(&inputs, |tape, m| {
            let mut p = ca.clone();
            load_named(&mut p, "u", m);
            let low = tape.param("low", m["low"].clone())?;
            let high = tape.param("high", m["high"].clone())?;
            let y = cross_attention_fuse(tape, low, high, &p, "u")?;
            tape.dot(y, &proj)
        })?;
        worst = worst.max(err);
    }
    Ok(OracleReport::new("grad_cross_attention_fuse", worst, GRAD_TOL, seeds.to_vec()))
}

/// Three-stage feature pyramid no larger than `(1, 3, 4, 4)` per level.
fn pyramid(r: &mut ChaCha8Rng) -> Vec<(usize, usize, usize)> {
    vec![(r.random_range(1..=3), 4, 4), (r.random_range(1..=3), 2, 2), (r.random_range(1..=3), 2, 2)]
}

fn random_fam(c_out: usize, c_in: usize, h: usize, w: usize, seed: u64) -> Result<FamParams<f64>> {
    let mut f = init_fam::<f64>(c_out, c_in, h, w, 0.1, seed)?;
    let mut r = rng(seed);
    f.k_re = Tensor::randn(f.k_re.shape(), 0.5, &mut r);
    f.k_im = Tensor::randn(f.k_im.shape(), 0.5, &mut r);
    Ok(f)
}

pub fn layer_to_layer_grad_suite(seeds: &[u64]) -> Result<OracleReport> {
    let mut worst = 0.0f64;
    for &s in seeds {
        let mut r = rng(s);
        let student = pyramid(&mut r);
        let teacher = pyramid(&mut r);
        let mut inputs = Inputs::new();
        let mut teacher_feats = Vec::new();
        let mut las: Vec<LocalAttnParams<f64>> = Vec::new();
        let mut fams = Vec::new();
        for (k, (&(cs, h, w), &(ct, _, _))) in student.iter().zip(&teacher).enumerate() {
            inputs.insert(format!("s{k}"), Tensor::randn(&[1, cs, h, w], 1.0, &mut r));
            teacher_feats.push(Tensor::randn(&[1, ct, h, w], 1.0, &mut r));
            let window = if h >= 3 { 3 } else { 1 };
            let mut la = init_local_attention::<f64>(cs, window, s + k as u64)?;
            la.rel = Tensor::randn(la.rel.shape(), 0.5, &mut r);
            export(&la, &format!("la.{k}"), &mut inputs);
            las.push(la);
            let f = random_fam(ct, cs, h, w, s + 10 + k as u64)?;
            export(&f, &format!("fam.{k}"), &mut inputs);
            fams.push(f);
        }
        let err = grad_check(&inputs, |tape, m| {
            let mut la = las.clone();
            let mut fam = fams.clone();
            for k in 0..3 {
                load_named(&mut la[k], &format!("la.{k}"), m);
                load_named(&mut fam[k], &format!("fam.{k}"), m);
            }
            let t: Vec<Var> = teacher_feats.iter().map(|f| tape.constant(f.clone())).collect();
            let st = (0..3).map(|k| tape.param(format!("s{k}"), m[&format!("s{k}")].clone())).collect::<Result<Vec<_>>>()?;
            layer_to_layer_loss(tape, &t, &st, &la, &fam)
        })?;
        worst = worst.max(err);
    }
    Ok(OracleReport::new("grad_layer_to_layer_loss", worst, GRAD_TOL, seeds.to_vec()))
}

pub fn review_grad_suite(seeds: &[u64]) -> Result<OracleReport> {
    let mut worst = 0.0f64;
    for &s in seeds {
        let mut r = rng(s);
        let student = pyramid(&mut r);
        let teacher = pyramid(&mut r);
        let mut inputs = Inputs::new();
        let mut teacher_feats = Vec::new();
        let mut fams = Vec::new();
        let mut cas: Vec<CrossAttnParams<f64>> = Vec::new();
        for (k, (&(cs, h, w), &(ct, _, _))) in student.iter().zip(&teacher).enumerate() {
            inputs.insert(format!("s{k}"), Tensor::randn(&[1, cs, h, w], 1.0, &mut r));
            teacher_feats.push(Tensor::randn(&[1, ct, h, w], 1.0, &mut r));
            let f = random_fam(ct, cs, h, w, s + 10 + k as u64)?;
            export(&f, &format!("fam.{k}"), &mut inputs);
            fams.push(f);
            if k + 1 < student.len() {
                let ca = init_cross_attention::<f64>(cs, student[k + 1].0, 3, true, s + 20 + k as u64)?;
                export(&ca, &format!("crossat.{k}"), &mut inputs);
                cas.push(ca);
            }
        }
        let err = grad_check(&inputs, |tape, m| {
            let mut ca = cas.clone();
            let mut fam = fams.clone();
            for (k, c) in ca.iter_mut().enumerate() {
                load_named(c, &format!("crossat.{k}"), m);
            }
            for (k, f) in fam.iter_mut().enumerate() {
                load_named(f, &format!("fam.{k}"), m);
            }
            let t: Vec<Var> = teacher_feats.iter().map(|f| tape.constant(f.clone())).collect();
            let st = (0..3).map(|k| tape.param(format!("s{k}"), m[&format!("s{k}")].clone())).collect::<Result<Vec<_>>>()?;
            review_loss(tape, &t, &st, &ca, &fam)
        })?;
        worst = worst.max(err);
    }
    Ok(OracleReport::new("grad_review_loss", worst, GRAD_TOL, seeds.to_vec()))
}

/// Every suite, with the seed counts the acceptance criteria require.
pub fn run_all() -> Result<Vec<OracleReport>> {
    let seeds: Vec<u64> = (0..10).collect();
    Ok(vec![
        fft_suite(60, 0)?,
        global_filter_suite(&seeds)?,
        conv2d_suite(&seeds)?,
        local_attention_suite(&seeds)?,
        cross_attention_suite(&seeds)?,
        fam_grad_suite(&seeds)?,
        local_attention_grad_suite(&seeds)?,
        cross_attention_grad_suite(&seeds)?,
        layer_to_layer_grad_suite(&seeds)?,
        review_grad_suite(&seeds)?,
    ])
}

pub fn report_csv(reports: &[OracleReport]) -> String {
    let mut s = format!("{}\n", OracleReport::csv_header());
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
