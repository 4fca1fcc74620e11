use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use famkd::checkpoint::{self, TensorTable};
use famkd::data::{self, Dataset, Split, IMAGE_BYTES};
use famkd::distill::DistillHeads;
use famkd::fam::apply_global_filter;
use famkd::model::{ArchDescriptor, StagedModel};
use famkd::trainer::{self, EpochMetrics, TrainLog};
use famkd::{selftest, spectral, Error, NamedParams, Tape, Tensor};
use serde_json::{json, Value as Json};

use crate::config::RunConfig;
use crate::ConfigArgs;

/// The `--data` value that selects the synthetic grating corpus.
pub const SYNTHETIC: &str = "synthetic";

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Param(_) | Error::Plan(_) | Error::Format(_) | Error::Io(_) => Failure::invalid(e.to_string()),
            Error::Shape { .. } | Error::Oracle(_) => Failure::internal(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

pub fn build_id() -> String {
    format!("famkd {} {}-{}", env!("CARGO_PKG_VERSION"), std::env::consts::ARCH, std::env::consts::OS)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    with_suffix(ckpt, ".json")
}

/// FNV-1a over a file's bytes; pins which teacher a student came from.
fn digest(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn resolve(args: &ConfigArgs, base: RunConfig) -> Result<RunConfig, Failure> {
    let mut rc = base;
    if let Some(path) = &args.config {
        rc.merge_file(path)?;
    }
    for o in &args.overrides {
        rc.apply_override(o)?;
    }
    Ok(rc)
}

fn read_sidecar(ckpt: &Path) -> Result<Option<Json>, Failure> {
    let path = sidecar_path(ckpt);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(Error::from)?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Failure::invalid(format!("{} is not valid JSON: {e}", path.display())))
}

/// Defaults, then the checkpoint's recorded config, then the user's file and
/// overrides.
fn config_for_checkpoint(ckpt: &Path, args: &ConfigArgs) -> Result<(RunConfig, Option<Json>), Failure> {
    let mut rc = RunConfig::default();
    let side = read_sidecar(ckpt)?;
    if let Some(cfg) = side.as_ref().and_then(|s| s.get("config")).and_then(Json::as_object) {
        rc.merge_json(cfg)?;
    }
    Ok((resolve(args, rc)?, side))
}

struct Splits {
    train: Dataset,
    test: Dataset,
    synthetic: bool,
}

fn load_data(source: &str, rc: &RunConfig) -> Result<Splits, Failure> {
    if source == SYNTHETIC {
        let spec = rc.synthetic();
        let train = data::synthetic_dataset(spec)?;
        let test = data::synthetic_dataset(spec.held_out(rc.usize("data.test_per_class")))?;
        return Ok(Splits { train, test, synthetic: true });
    }
    let dir = Path::new(source);
    if !dir.is_dir() {
        return Err(Failure::invalid(format!("--data must be '{SYNTHETIC}' or a directory, got '{source}'")));
    }
    Ok(Splits {
        train: data::load_cifar100(dir, Split::Train)?,
        test: data::load_cifar100(dir, Split::Test)?,
        synthetic: false,
    })
}

fn data_json(source: &str, splits: &Splits) -> Json {
    json!({
        "source": source,
        "train_items": splits.train.len(),
        "test_items": splits.test.len(),
        "classes": splits.train.classes(),
    })
}

fn metrics_json(m: &EpochMetrics) -> Json {
    json!({
        "epoch": m.epoch,
        "split": m.split,
        "loss_task": m.loss_task,
        "loss_feat": m.loss_feat,
        "loss_total": m.loss_total,
        "top1": m.top1,
        "top5": m.top5,
    })
}

fn print_progress(m: &EpochMetrics) {
    let feat = m.loss_feat.map(|f| format!(" feat {f:.4}")).unwrap_or_default();
    eprintln!(
        "epoch {:>3} {:<5} loss {:.4}{feat} top1 {:.4} top5 {:.4}",
        m.epoch, m.split, m.loss_task, m.top1, m.top5
    );
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| Failure::invalid(format!("cannot write {}: {e}", path.display())))
}

fn write_outputs(out: &Path, table: &TensorTable, log: &TrainLog, mut side: Json) -> Outcome {
    checkpoint::save(out, table)?;
    let metrics = with_suffix(out, ".metrics.csv");
    let steps = with_suffix(out, ".steps.csv");
    write_text(&metrics, &log.metrics_csv())?;
    write_text(&steps, &log.steps_csv())?;
    side["metrics"] = log.final_metrics().map(metrics_json).unwrap_or(Json::Null);
    side["artifacts"] = json!({
        "checkpoint": out.display().to_string(),
        "metrics_csv": metrics.display().to_string(),
        "steps_csv": steps.display().to_string(),
    });
    let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    write_text(&sidecar_path(out), &format!("{text}\n"))
}

fn arch_json(a: ArchDescriptor) -> Json {
    json!({ "depth": a.depth, "width": a.width, "classes": a.num_classes })
}

fn model_from(table: &TensorTable, what: &str) -> Result<StagedModel<f32>, Failure> {
    StagedModel::from_tensors(checkpoint::select(table, "model"))
        .map_err(|e| Failure::invalid(format!("{what} is not a model checkpoint: {e}")))
}

pub fn train_teacher(args: &ConfigArgs, source: &str, out: &Path) -> Outcome {
    let rc = resolve(args, RunConfig::default())?;
    let splits = load_data(source, &rc)?;
    let cfg = rc.train_config(splits.synthetic)?;
    let arch = rc.arch(splits.train.classes())?;
    let (model, log) =
        trainer::train_teacher(&cfg, arch, &splits.train, Some(&splits.test), Some(&mut print_progress))?;
    let side = json!({
        "command": "train-teacher",
        "build": build_id(),
        "seed": cfg.seed,
        "config": rc.to_json(),
        "data": data_json(source, &splits),
        "arch": arch_json(arch),
    });
    write_outputs(out, model.tensors(), &log, side)
}

pub fn distill(args: &ConfigArgs, teacher_path: &Path, source: &str, out: &Path) -> Outcome {
    let rc = resolve(args, RunConfig::default())?;
    let plan = rc.plan()?;
    let heads_cfg = rc.head_config()?;
    let bytes = std::fs::read(teacher_path)
        .map_err(|e| Failure::invalid(format!("cannot read teacher {}: {e}", teacher_path.display())))?;
    let teacher = model_from(&checkpoint::from_bytes(&bytes)?, "teacher")?;
    let splits = load_data(source, &rc)?;
    let cfg = rc.train_config(splits.synthetic)?;
    let arch = rc.arch(splits.train.classes())?;
    let outcome = trainer::distill_student(
        &cfg,
        &plan,
        &heads_cfg,
        &teacher,
        arch,
        &splits.train,
        Some(&splits.test),
        Some(&mut print_progress),
    )?;
    let mut table = outcome.student.tensors().clone();
    outcome.heads.export("heads", &mut table);
    let side = json!({
        "command": "distill",
        "build": build_id(),
        "seed": cfg.seed,
        "config": rc.to_json(),
        "data": data_json(source, &splits),
        "arch": arch_json(arch),
        "teacher": {
            "path": teacher_path.display().to_string(),
            "digest": digest(&bytes),
            "arch": arch_json(teacher.arch()),
        },
    });
    write_outputs(out, &table, &outcome.log, side)
}

pub fn eval(args: &ConfigArgs, ckpt: &Path, source: &str) -> Outcome {
    let table = checkpoint::load(ckpt)?;
    let model = model_from(&table, &ckpt.display().to_string())?;
    let (rc, _) = config_for_checkpoint(ckpt, args)?;
    let splits = load_data(source, &rc)?;
    if splits.test.classes() != model.arch().num_classes {
        return Err(Failure::invalid(format!(
            "checkpoint predicts {} classes, data has {}",
            model.arch().num_classes,
            splits.test.classes()
        )));
    }
    let m = trainer::evaluate(&model, &splits.test)?;
    let report = json!({
        "checkpoint": ckpt.display().to_string(),
        "items": splits.test.len(),
        "loss": m.loss,
        "top1": m.top1,
        "top5": m.top5,
    });
    println!("{report}");
    Ok(())
}

fn teacher_arch(side: &Json) -> Result<ArchDescriptor, Failure> {
    let a = &side["teacher"]["arch"];
    let field = |k: &str| {
        a[k].as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Failure::invalid(format!("sidecar lacks teacher.arch.{k}; was this checkpoint made by `distill`?")))
    };
    Ok(ArchDescriptor::new(field("depth")?, field("width")?, field("classes")?)?)
}

fn load_heads(table: &TensorTable, rc: &RunConfig, side: &Json, student: ArchDescriptor) -> Result<DistillHeads<f32>, Failure> {
    let plan = rc.plan()?;
    let teacher = teacher_arch(side)?;
    let mut heads = DistillHeads::init(&plan, &teacher.tap_shapes(), &student.tap_shapes(), &rc.head_config()?, 0)?;
    let mut missing = Vec::new();
    heads.visit_params_mut(&mut |name, t| match table.get(&format!("heads.{name}")) {
        Some(saved) if saved.shape() == t.shape() => *t = saved.clone(),
        _ => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(Failure::invalid(format!("checkpoint lacks head tensors: {}", missing.join(", "))));
    }
    Ok(heads)
}

/// CSV rows `map,channel,u,v,magnitude` for each `(C, H, W)` plane.
fn magnitude_rows(csv: &mut String, map: &str, z: &famkd::ComplexTensor<f32>) -> Outcome {
    let (_, c, h, w) = z.dims4()?;
    for ch in 0..c {
        for u in 0..h {
            for v in 0..w {
                let m = z.data()[(ch * h + u) * w + v].norm();
                let _ = writeln!(csv, "{map},{ch},{u},{v},{m:e}");
            }
        }
    }
    Ok(())
}

pub fn spectrum(ckpt: &Path, stage: usize, input: &Path, out: &Path) -> Outcome {
    let table = checkpoint::load(ckpt)?;
    let student = model_from(&table, &ckpt.display().to_string())?;
    let (rc, side) = config_for_checkpoint(ckpt, &ConfigArgs::default())?;
    let side = side.ok_or_else(|| Failure::invalid(format!("{} is missing", sidecar_path(ckpt).display())))?;
    let heads = load_heads(&table, &rc, &side, student.arch())?;
    let site = heads
        .plan
        .stage_pairs
        .iter()
        .position(|&(_, s)| s == stage)
        .ok_or_else(|| Failure::invalid(format!("student stage {stage} has no FAM site in this checkpoint")))?;

    let pixels = std::fs::read(input).map_err(|e| Failure::invalid(format!("cannot read {}: {e}", input.display())))?;
    if pixels.len() != IMAGE_BYTES {
        return Err(Failure::invalid(format!(
            "{} holds {} bytes; expected a raw {IMAGE_BYTES}-byte 32x32 RGB image",
            input.display(),
            pixels.len()
        )));
    }
    let image = Dataset::new(pixels, vec![0], student.arch().num_classes)?.batch::<f32>(&[0]).images;
    let (_, taps) = student.forward(&image)?;
    let mut tape = Tape::new();
    let tap_vars: Vec<_> = taps.into_iter().map(|t| tape.constant(t)).collect();
    let inputs = heads.fam_inputs(&mut tape, &tap_vars)?;
    let x: &Tensor<f32> = tape.value(inputs[site]);
    let fam = &heads.fam[site];

    let spec = spectral::fft2(x)?;
    let filtered = apply_global_filter(&spec, &fam.filter())?;
    let masked = fam.hpf.apply(&filtered)?;
    let mut csv = String::from("map,channel,u,v,magnitude\n");
    magnitude_rows(&mut csv, "input", &spec)?;
    magnitude_rows(&mut csv, "filtered", &filtered)?;
    magnitude_rows(&mut csv, "filtered_hpf", &masked)?;
    write_text(out, &csv)?;

    let side_out = json!({
        "command": "spectrum",
        "build": build_id(),
        "checkpoint": ckpt.display().to_string(),
        "checkpoint_digest": digest(&std::fs::read(ckpt).map_err(Error::from)?),
        "input": input.display().to_string(),
        "stage": stage,
        "site": site,
        "config": rc.to_json(),
    });
    let text = serde_json::to_string_pretty(&side_out).expect("sidecar serializes");
    write_text(&sidecar_path(out), &format!("{text}\n"))
}

pub fn selftest() -> Outcome {
    let reports = selftest::run_all()?;
    print!("{}", selftest::report_csv(&reports));
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::internal(format!("oracle checks failed: {}", failed.join(", "))))
    }
}
