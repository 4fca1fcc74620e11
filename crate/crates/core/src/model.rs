//! CIFAR-style residual networks with stage taps.
//!
//! Layout: 3×3 stem conv + BN + ReLU, then three stages of basic blocks at
//! widths `(16, 32, 64)·width` and strides `(1, 2, 2)`, global average pool,
//! linear classifier. Blocks add the shortcut before the final ReLU; where
//! the shape changes the shortcut is a strided 1×1 conv + BN. Convs carry no
//! bias.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{Mode, RunningStats};
use crate::params::NamedParams;
use crate::scalar::Scalar;
use crate::tape::{BnBatchStats, Tape, Var};
use crate::tensor::Tensor;

pub const SUPPORTED_DEPTHS: [usize; 5] = [8, 20, 32, 56, 110];
pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_SIZE: usize = 32;
const BASE_WIDTHS: [usize; 3] = [16, 32, 64];
const FC_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub depth: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl ArchDescriptor {
    pub fn new(depth: usize, width: usize, num_classes: usize) -> Result<Self> {
        if !SUPPORTED_DEPTHS.contains(&depth) {
            return Err(Error::Param(format!(
                "unsupported depth {depth}; expected one of {SUPPORTED_DEPTHS:?}"
            )));
        }
        if width == 0 {
            return Err(Error::Param("width factor must be at least 1".into()));
        }
        if num_classes < 2 {
            return Err(Error::Param(format!("need at least 2 classes, got {num_classes}")));
        }
        Ok(Self {
            depth,
            width,
            num_classes,
        })
    }

    pub fn blocks_per_stage(&self) -> usize {
        (self.depth - 2) / 6
    }

    pub fn stage_widths(&self) -> [usize; 3] {
        BASE_WIDTHS.map(|c| c * self.width)
    }

    /// `(C, H, W)` of each stage tap for 32×32 inputs.
    pub fn tap_shapes(&self) -> Vec<(usize, usize, usize)> {
        let w = self.stage_widths();
        vec![
            (w[0], INPUT_SIZE, INPUT_SIZE),
            (w[1], INPUT_SIZE / 2, INPUT_SIZE / 2),
            (w[2], INPUT_SIZE / 4, INPUT_SIZE / 4),
        ]
    }

    /// Every tensor the model holds, in construction order, with its shape.
    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let widths = self.stage_widths();
        conv_bn_layout(&mut out, "model.stem.conv", "model.stem.bn", INPUT_CHANNELS, widths[0], 3);
        let mut c_in = widths[0];
        for (s, &c) in widths.iter().enumerate() {
            for b in 0..self.blocks_per_stage() {
                let p = format!("model.stage{s}.block{b}");
                let block_in = if b == 0 { c_in } else { c };
                conv_bn_layout(&mut out, &format!("{p}.conv1"), &format!("{p}.bn1"), block_in, c, 3);
                conv_bn_layout(&mut out, &format!("{p}.conv2"), &format!("{p}.bn2"), c, c, 3);
                if b == 0 && (s > 0 || block_in != c) {
                    conv_bn_layout(&mut out, &format!("{p}.shortcut.conv"), &format!("{p}.shortcut.bn"), block_in, c, 1);
                }
            }
            c_in = c;
        }
        out.push(("model.fc.w".into(), vec![widths[2], self.num_classes], Init::Normal(FC_INIT_STD)));
        out.push(("model.fc.b".into(), vec![self.num_classes], Init::Zero));
        out
    }

    /// Trainable parameter count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .filter(|(n, _, _)| !is_running_stat(n))
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Kaiming,
    Normal(f64),
    Zero,
    One,
}

fn conv_bn_layout(out: &mut Vec<(String, Vec<usize>, Init)>, conv: &str, bn: &str, c_in: usize, c_out: usize, k: usize) {
    out.push((format!("{conv}.w"), vec![c_out, c_in, k, k], Init::Kaiming));
    out.push((format!("{bn}.gamma"), vec![c_out], Init::One));
    out.push((format!("{bn}.beta"), vec![c_out], Init::Zero));
    out.push((format!("{bn}.running_mean"), vec![c_out], Init::Zero));
    out.push((format!("{bn}.running_var"), vec![c_out], Init::One));
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// A residual network plus its full tensor table (weights and BN running
/// statistics), keyed by checkpoint name.
#[derive(Clone, Debug, PartialEq)]
pub struct StagedModel<T> {
    arch: ArchDescriptor,
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub logits: Var,
    /// Post-activation output of each stage's last block, shallow to deep.
    pub taps: Vec<Var>,
    /// Train-mode batch statistics, keyed by BN prefix.
    pub bn_stats: Vec<(String, BnBatchStats<T>)>,
}

impl<T: Scalar> StagedModel<T> {
    /// Kaiming-normal (fan-out) convs, `N(0, 0.01²)` classifier, unit BN.
    pub fn build(arch: ArchDescriptor, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in arch.layout() {
            let t = match init {
                Init::Kaiming => {
                    let fan_out = shape[0] * shape[2] * shape[3];
                    Tensor::randn(&shape, (2.0 / fan_out as f64).sqrt(), &mut rng)
                }
                Init::Normal(std) => Tensor::randn(&shape, std, &mut rng),
                Init::Zero => Tensor::zeros(&shape),
                Init::One => Tensor::ones(&shape),
            };
            tensors.insert(name, t);
        }
        Self { arch, tensors }
    }

    /// Rebuilds a model from a tensor table, inferring the architecture.
    pub fn from_tensors(tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let get = |n: &str| tensors.get(n).ok_or_else(|| Error::Format(format!("missing tensor '{n}'")));
        let stem = get("model.stem.conv.w")?;
        if stem.rank() != 4 || stem.shape()[0] % BASE_WIDTHS[0] != 0 {
            return Err(Error::Format(format!("unexpected stem shape {:?}", stem.shape())));
        }
        let width = stem.shape()[0] / BASE_WIDTHS[0];
        let classes = get("model.fc.b")?.len();
        let blocks = (0..).take_while(|b| tensors.contains_key(&format!("model.stage0.block{b}.conv1.w"))).count();
        let arch = ArchDescriptor::new(6 * blocks + 2, width, classes)?;
        let layout = arch.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors for depth {}, found {}",
                layout.len(),
                arch.depth,
                tensors.len()
            )));
        }
        for (name, shape, _) in &layout {
            let t = get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!("tensor '{name}' has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(Self { arch, tensors })
    }

    pub fn arch(&self) -> ArchDescriptor {
        self.arch
    }

    /// Full table including running statistics.
    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    fn tensor(&self, name: &str) -> &Tensor<T> {
        self.tensors.get(name).unwrap_or_else(|| panic!("layout guarantees '{name}'"))
    }

    fn running_stats(&self, bn: &str) -> RunningStats<T> {
        RunningStats {
            mean: self.tensor(&format!("{bn}.running_mean")).data().to_vec(),
            var: self.tensor(&format!("{bn}.running_var")).data().to_vec(),
        }
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn apply_bn_stats(&mut self, stats: &[(String, BnBatchStats<T>)]) {
        for (bn, s) in stats {
            let mut rs = self.running_stats(bn);
            rs.update(&s.mean, &s.var_unbiased);
            self.tensors
                .get_mut(&format!("{bn}.running_mean"))
                .expect("bn mean")
                .data_mut()
                .copy_from_slice(&rs.mean);
            self.tensors
                .get_mut(&format!("{bn}.running_var"))
                .expect("bn var")
                .data_mut()
                .copy_from_slice(&rs.var);
        }
    }

    /// Records the forward pass. With `trainable`, weights are named tape
    /// parameters (`model.…`); otherwise they are constants and nothing
    /// upstream of the input receives gradient.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, x: Var, mode: Mode, trainable: bool) -> Result<ForwardOutput<T>> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != INPUT_CHANNELS || xs[2] != INPUT_SIZE || xs[3] != INPUT_SIZE {
            return Err(Error::shape("forward_with_taps", &xs, &[xs.first().copied().unwrap_or(0), 3, 32, 32]));
        }
        let mut fw = Pass {
            model: self,
            tape,
            mode,
            trainable,
            bn_stats: Vec::new(),
        };
        let stem = fw.conv_bn(x, "model.stem.conv", "model.stem.bn", 1, 1)?;
        let mut h = fw.tape.relu(stem)?;
        let mut taps = Vec::with_capacity(3);
        for s in 0..3 {
            for b in 0..self.arch.blocks_per_stage() {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                h = fw.block(h, &format!("model.stage{s}.block{b}"), stride)?;
            }
            taps.push(h);
        }
        let pooled = fw.tape.global_avg_pool(h)?;
        let w = fw.bind("model.fc.w")?;
        let b = fw.bind("model.fc.b")?;
        let logits = fw.tape.linear(pooled, w, Some(b))?;
        Ok(ForwardOutput {
            logits,
            taps,
            bn_stats: fw.bn_stats,
        })
    }

    /// Tape-free eval-mode pass returning logits and the three taps.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward_on_tape(&mut tape, xv, Mode::Eval, false)?;
        let taps = out.taps.iter().map(|&t| tape.value(t).clone()).collect();
        Ok((tape.value(out.logits).clone(), taps))
    }
}

struct Pass<'a, T> {
    model: &'a StagedModel<T>,
    tape: &'a mut Tape<T>,
    mode: Mode,
    trainable: bool,
    bn_stats: Vec<(String, BnBatchStats<T>)>,
}

impl<T: Scalar> Pass<'_, T> {
    fn bind(&mut self, name: &str) -> Result<Var> {
        let t = self.model.tensor(name).clone();
        if self.trainable {
            self.tape.param(name, t)
        } else {
            Ok(self.tape.constant(t))
        }
    }

    fn conv_bn(&mut self, x: Var, conv: &str, bn: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.bind(&format!("{conv}.w"))?;
        let y = self.tape.conv2d(x, w, stride, pad)?;
        let gamma = self.bind(&format!("{bn}.gamma"))?;
        let beta = self.bind(&format!("{bn}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (out, stats) = self.tape.batch_norm_train(y, gamma, beta)?;
                self.bn_stats.push((bn.to_string(), stats));
                Ok(out)
            }
            Mode::Eval => {
                let rs = self.model.running_stats(bn);
                self.tape.batch_norm_eval(y, gamma, beta, &rs)
            }
        }
    }

    fn block(&mut self, x: Var, p: &str, stride: usize) -> Result<Var> {
        let a = self.conv_bn(x, &format!("{p}.conv1"), &format!("{p}.bn1"), stride, 1)?;
        let a = self.tape.relu(a)?;
        let a = self.conv_bn(a, &format!("{p}.conv2"), &format!("{p}.bn2"), 1, 1)?;
        let shortcut = if self.model.tensors.contains_key(&format!("{p}.shortcut.conv.w")) {
            self.conv_bn(x, &format!("{p}.shortcut.conv"), &format!("{p}.shortcut.bn"), stride, 0)?
        } else {
            x
        };
        let sum = self.tape.add(a, shortcut)?;
        self.tape.relu(sum)
    }
}

impl<T: Scalar> NamedParams<T> for StagedModel<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (n, t) in &self.tensors {
            if !is_running_stat(n) {
                f(n, t);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (n, t) in self.tensors.iter_mut() {
            if !is_running_stat(n) {
                f(n, t);
            }
        }
    }
}
