//! Teacher pretraining, student distillation and evaluation.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment_batch, shuffled_indices, Augment, Dataset};
use crate::distill::{total_loss_on_tape, DistillHeads, DistillPlan, HeadConfig};
use crate::error::{Error, Result};
use crate::model::{ArchDescriptor, StagedModel};
use crate::ops::{self, Mode};
use crate::optim::{LrSchedule, Sgd};
use crate::params::NamedParams;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,split,loss_task,loss_feat,loss_total,top1,top5";
pub const STEPS_HEADER: &str = "step,epoch,lr,loss_task,loss_feat,loss_total";
const EVAL_BATCH: usize = 100;

// Independent random streams so that e.g. adding distillation heads does not
// perturb the student's initialization or batch order.
const STREAM_INIT: u64 = 0;
const STREAM_ORDER: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_HEADS: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub seed: u64,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![30, 45],
            lr_decay: 0.1,
            seed: 0,
            augment: Augment::STANDARD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Param(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Param(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Param(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size < 2 {
            return Err(Error::Param("batch_size must be at least 2 for batch norm".into()));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::Param(format!("lr_decay must be positive, got {}", self.lr_decay)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Param(format!("milestones {:?} must be strictly increasing", self.milestones)));
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.epochs {
                return Err(Error::Param(format!("milestone {last} is not below epochs {}", self.epochs)));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            milestones: self.milestones.clone(),
            decay: self.lr_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

/// One row of the metrics CSV. `loss_feat` is absent where it was not
/// measured (teacher runs, held-out rows, the pre-training row).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: &'static str,
    pub loss_task: f64,
    pub loss_feat: Option<f64>,
    pub loss_total: f64,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_task: f64,
    pub loss_feat: Option<f64>,
    pub loss_total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl TrainLog {
    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for m in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{:.6},{},{:.6},{:.6},{:.6}",
                m.epoch,
                m.split,
                m.loss_task,
                opt(m.loss_feat),
                m.loss_total,
                m.top1,
                m.top5
            );
        }
        s
    }

    pub fn steps_csv(&self) -> String {
        let mut s = format!("{STEPS_HEADER}\n");
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{:e},{:.6},{},{:.6}",
                r.step,
                r.epoch,
                r.lr,
                r.loss_task,
                opt(r.loss_feat),
                r.loss_total
            );
        }
        s
    }

    /// The final held-out row, or the final row of any split.
    pub fn final_metrics(&self) -> Option<&EpochMetrics> {
        self.epochs.iter().rev().find(|m| m.split == "test").or(self.epochs.last())
    }

    pub fn feat_losses(&self) -> Vec<f64> {
        self.steps.iter().filter_map(|r| r.loss_feat).collect()
    }
}

/// Rank of the true label under descending logits; ties go to the lower
/// index.
fn true_rank(row: &[f32], label: usize) -> usize {
    let t = row[label];
    row.iter().enumerate().filter(|&(j, &v)| v > t || (v == t && j < label)).count()
}

/// Top-1/top-5 hit counts for one logits matrix.
pub fn topk_hits(logits: &Tensor<f32>, labels: &[usize]) -> (usize, usize) {
    let classes = logits.shape()[1];
    let mut h1 = 0;
    let mut h5 = 0;
    for (i, &l) in labels.iter().enumerate() {
        let r = true_rank(&logits.data()[i * classes..(i + 1) * classes], l);
        h1 += usize::from(r < 1);
        h5 += usize::from(r < 5);
    }
    (h1, h5)
}

/// Deterministic eval-mode pass over the whole dataset, in order.
pub fn evaluate(model: &StagedModel<f32>, data: &Dataset) -> Result<EvalMetrics> {
    if model.arch().num_classes != data.classes() {
        return Err(Error::Plan(format!(
            "model has {} classes, dataset has {}",
            model.arch().num_classes,
            data.classes()
        )));
    }
    if data.is_empty() {
        return Err(Error::Param("cannot evaluate on an empty dataset".into()));
    }
    let mut loss = 0.0;
    let (mut h1, mut h5) = (0, 0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = data.batch::<f32>(chunk);
        let (logits, _) = model.forward(&batch.images)?;
        let (l, _) = ops::cross_entropy(&logits, &batch.labels)?;
        loss += l as f64 * chunk.len() as f64;
        let (a, b) = topk_hits(&logits, &batch.labels);
        h1 += a;
        h5 += b;
    }
    let n = data.len() as f64;
    Ok(EvalMetrics {
        loss: loss / n,
        top1: h1 as f64 / n,
        top5: h5 as f64 / n,
    })
}

fn eval_row(epoch: usize, split: &'static str, m: EvalMetrics) -> EpochMetrics {
    EpochMetrics {
        epoch,
        split,
        loss_task: m.loss,
        loss_feat: None,
        loss_total: m.loss,
        top1: m.top1,
        top5: m.top5,
    }
}

/// Called after each epoch's rows are appended.
pub type Progress<'a> = &'a mut dyn FnMut(&EpochMetrics);

struct DistillState<'a> {
    teacher: &'a StagedModel<f32>,
    heads: DistillHeads<f32>,
}

fn run(
    cfg: &TrainConfig,
    student: &mut StagedModel<f32>,
    mut distill: Option<&mut DistillState<'_>>,
    train: &Dataset,
    test: Option<&Dataset>,
    mut progress: Option<Progress<'_>>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.len() < cfg.batch_size {
        return Err(Error::Param(format!(
            "training set of {} items is smaller than one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let alpha = distill.as_ref().map(|d| d.heads.plan.alpha);
    let mut log = TrainLog::default();
    let emit = |log: &mut TrainLog, row: EpochMetrics, progress: &mut Option<Progress<'_>>| {
        if let Some(p) = progress.as_mut() {
            p(&row);
        }
        log.epochs.push(row);
    };
    emit(&mut log, eval_row(0, "train", evaluate(student, train)?), &mut progress);
    if let Some(t) = test {
        emit(&mut log, eval_row(0, "test", evaluate(student, t)?), &mut progress);
    }
    let mut order_rng = stream(cfg.seed, STREAM_ORDER);
    let mut aug_rng = stream(cfg.seed, STREAM_AUGMENT);
    let mut sgd = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay)?;
    let schedule = cfg.schedule();
    let steps_per_epoch = train.len() / cfg.batch_size;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let lr = schedule.at_epoch(epoch - 1);
        let order = shuffled_indices(train.len(), &mut order_rng);
        let mut sums = [0.0f64; 3];
        let (mut h1, mut h5, mut seen) = (0, 0, 0);
        for b in 0..steps_per_epoch {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let batch = augment_batch(&train.batch::<f32>(idx), cfg.augment, &mut aug_rng);
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(batch.images.clone());
            let out = student.forward_on_tape(&mut tape, x, Mode::Train, true)?;
            let task = tape.cross_entropy(out.logits, &batch.labels)?;
            let (loss, feat) = match distill.as_deref() {
                Some(d) => {
                    let (_, teacher_taps) = d.teacher.forward(&batch.images)?;
                    let t_vars: Vec<_> = teacher_taps.into_iter().map(|t| tape.constant(t)).collect();
                    let feat = d.heads.feature_loss(&mut tape, &t_vars, &out.taps)?;
                    (total_loss_on_tape(&mut tape, task, feat, alpha.unwrap_or(0.0))?, Some(feat))
                }
                None => (task, None),
            };
            let loss_task = tape.value(task).data()[0] as f64;
            let loss_feat = feat.map(|f| tape.value(f).data()[0] as f64);
            let loss_total = tape.value(loss).data()[0] as f64;
            if !loss_total.is_finite() {
                return Err(Error::Param(format!("loss diverged at step {step} (lr {lr})")));
            }
            let (a, c) = topk_hits(tape.value(out.logits), &batch.labels);
            h1 += a;
            h5 += c;
            seen += idx.len();
            let grads = tape.backward(loss)?;
            let mut failure = None;
            student.visit_params_mut(&mut |name, p| {
                if let Some(g) = grads.named(name) {
                    if let Err(e) = sgd.step(name, p, g, lr) {
                        failure.get_or_insert(e);
                    }
                }
            });
            if let Some(d) = distill.as_deref_mut() {
                d.heads.visit_params_mut(&mut |name, p| {
                    if let Some(g) = grads.named(name) {
                        if let Err(e) = sgd.step(name, p, g, lr) {
                            failure.get_or_insert(e);
                        }
                    }
                });
            }
            if let Some(e) = failure {
                return Err(e);
            }
            student.apply_bn_stats(&out.bn_stats);
            sums[0] += loss_task;
            sums[1] += loss_feat.unwrap_or(0.0);
            sums[2] += loss_total;
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss_task,
                loss_feat,
                loss_total,
            });
            step += 1;
        }
        let k = steps_per_epoch as f64;
        let row = EpochMetrics {
            epoch,
            split: "train",
            loss_task: sums[0] / k,
            loss_feat: distill.is_some().then_some(sums[1] / k),
            loss_total: sums[2] / k,
            top1: h1 as f64 / seen as f64,
            top5: h5 as f64 / seen as f64,
        };
        emit(&mut log, row, &mut progress);
        if let Some(t) = test {
            emit(&mut log, eval_row(epoch, "test", evaluate(student, t)?), &mut progress);
        }
    }
    Ok(log)
}

/// Cross-entropy training from a seeded initialization.
pub fn train_teacher(
    cfg: &TrainConfig,
    arch: ArchDescriptor,
    train: &Dataset,
    test: Option<&Dataset>,
    progress: Option<Progress<'_>>,
) -> Result<(StagedModel<f32>, TrainLog)> {
    check_classes(arch, train, test)?;
    let mut model = StagedModel::build(arch, init_seed(cfg.seed));
    let log = run(cfg, &mut model, None, train, test, progress)?;
    Ok((model, log))
}

/// A trained student together with its distillation heads.
#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: StagedModel<f32>,
    pub heads: DistillHeads<f32>,
    pub log: TrainLog,
}

/// Trains a fresh student against a fixed teacher with
/// `L = L_task + α·L_feat`. The student's initialization and batch order
/// match [`train_teacher`] with the same config, so `α = 0` reproduces plain
/// student training.
pub fn distill_student(
    cfg: &TrainConfig,
    plan: &DistillPlan,
    heads_cfg: &HeadConfig,
    teacher: &StagedModel<f32>,
    student_arch: ArchDescriptor,
    train: &Dataset,
    test: Option<&Dataset>,
    progress: Option<Progress<'_>>,
) -> Result<DistillOutcome> {
    check_classes(student_arch, train, test)?;
    if teacher.arch().num_classes != student_arch.num_classes {
        return Err(Error::Plan(format!(
            "teacher predicts {} classes, student {}",
            teacher.arch().num_classes,
            student_arch.num_classes
        )));
    }
    let heads = DistillHeads::init(
        plan,
        &teacher.arch().tap_shapes(),
        &student_arch.tap_shapes(),
        heads_cfg,
        heads_seed(cfg.seed),
    )?;
    let mut student = StagedModel::build(student_arch, init_seed(cfg.seed));
    let mut state = DistillState { teacher, heads };
    let log = run(cfg, &mut student, Some(&mut state), train, test, progress)?;
    Ok(DistillOutcome {
        student,
        heads: state.heads,
        log,
    })
}

fn init_seed(seed: u64) -> u64 {
    use rand::RngCore;
    stream(seed, STREAM_INIT).next_u64()
}

fn heads_seed(seed: u64) -> u64 {
    use rand::RngCore;
    stream(seed, STREAM_HEADS).next_u64()
}

fn check_classes(arch: ArchDescriptor, train: &Dataset, test: Option<&Dataset>) -> Result<()> {
    for d in std::iter::once(train).chain(test) {
        if d.classes() != arch.num_classes {
            return Err(Error::Plan(format!(
                "dataset has {} classes but the model predicts {}",
                d.classes(),
                arch.num_classes
            )));
        }
    }
    Ok(())
}

/// Trailing moving average over windows of `w`, one value per full window.
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || xs.len() < w {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() - w + 1);
    let mut acc: f64 = xs[..w].iter().sum();
    out.push(acc / w as f64);
    for i in w..xs.len() {
        acc += xs[i] - xs[i - w];
        out.push(acc / w as f64);
    }
    out
}
