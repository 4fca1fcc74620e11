use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn famkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_famkd")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn sidecar(ckpt: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(format!("{}.json", ckpt.display())).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn eval_json(ckpt: &Path) -> serde_json::Value {
    let o = famkd(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", "synthetic"]);
    assert!(o.status.success(), "{}", stderr(&o));
    serde_json::from_slice(&o.stdout).unwrap()
}

const TINY: &[&str] = &[
    "--set", "data.classes=3",
    "--set", "data.per_class=6",
    "--set", "data.test_per_class=4",
    "--set", "model.depth=8",
    "--set", "trainer.epochs=1",
    "--set", "trainer.batch_size=6",
    "--set", "trainer.milestones=[]",
];

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TINY.iter().copied()).collect()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn selftest_passes() {
    let o = famkd(&["selftest"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("op,max_rel_err,tolerance,pass"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.ends_with(",true")), "{out}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(famkd(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(famkd(&["eval", "--bogus"]).status.code(), Some(1));
    assert_eq!(famkd(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[fam]\nhpf_fraction = 0.01\nhpf_mode = \"ideal\"\n").unwrap();
    let out = dir.path().join("t.famk");
    let o = famkd(&["train-teacher", "--config", path_str(&cfg), "--data", "synthetic", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fam.hpf_mode"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn stage_mismatch_is_a_plan_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.famk");
    let o = famkd(&[
        "distill",
        "--teacher", "missing.famk",
        "--data", "synthetic",
        "--out", path_str(&out),
        "--set", "distill.student_stages=[1,2]",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("distillation plan error"), "{}", stderr(&o));
}

#[test]
fn train_distill_eval_spectrum_round() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = dir.path().join("teacher.famk");
    let o = famkd(&with_tiny(&["train-teacher", "--data", "synthetic", "--out", path_str(&teacher)]));
    assert!(o.status.success(), "{}", stderr(&o));
    for suffix in ["", ".json", ".metrics.csv", ".steps.csv"] {
        assert!(Path::new(&format!("{}{suffix}", teacher.display())).exists(), "missing {suffix}");
    }
    let metrics = std::fs::read_to_string(format!("{}.metrics.csv", teacher.display())).unwrap();
    assert!(metrics.starts_with("epoch,split,loss_task,loss_feat,loss_total,top1,top5\n"));

    let side = sidecar(&teacher);
    assert_eq!(side["config"]["model.depth"], 8);
    assert_eq!(side["seed"], 0);
    assert!(side["build"].as_str().unwrap().starts_with("famkd "));
    assert_eq!(eval_json(&teacher)["top1"], side["metrics"]["top1"]);

    // The sidecar's resolved config alone reproduces the checkpoint.
    let cfg = dir.path().join("replay.toml");
    let mut toml = String::new();
    for (k, v) in side["config"].as_object().unwrap() {
        toml.push_str(&format!("\"{k}\" = {v}\n"));
    }
    std::fs::write(&cfg, toml).unwrap();
    let replay = dir.path().join("replay.famk");
    let o = famkd(&["train-teacher", "--config", path_str(&cfg), "--data", "synthetic", "--out", path_str(&replay)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&teacher).unwrap(), std::fs::read(&replay).unwrap());

    let student = dir.path().join("student.famk");
    let o = famkd(&with_tiny(&[
        "distill",
        "--teacher", path_str(&teacher),
        "--data", "synthetic",
        "--out", path_str(&student),
        "--set", "crossat.dim=4",
    ]));
    assert!(o.status.success(), "{}", stderr(&o));
    let sside = sidecar(&student);
    assert_eq!(sside["config"]["distill.mode"], "review");
    assert_eq!(sside["teacher"]["arch"]["depth"], 8);
    assert_eq!(eval_json(&student)["top1"], sside["metrics"]["top1"]);
    let steps = std::fs::read_to_string(format!("{}.steps.csv", student.display())).unwrap();
    let first = steps.lines().nth(1).unwrap();
    assert_eq!(first.split(',').count(), 6);
    assert!(!first.split(',').nth(4).unwrap().is_empty(), "loss_feat logged: {first}");

    let image = dir.path().join("img.raw");
    std::fs::write(&image, (0..3072u32).map(|i| (i * 7 % 256) as u8).collect::<Vec<_>>()).unwrap();
    let csv = dir.path().join("spec.csv");
    let o = famkd(&[
        "spectrum",
        "--ckpt", path_str(&student),
        "--stage", "0",
        "--input", path_str(&image),
        "--out", path_str(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("map,channel,u,v,magnitude"));
    let rows: Vec<&str> = lines.collect();
    // Stage 0 of a width-1 ResNet has 16 channels on a 32×32 grid, for the
    // input spectrum and both filtered maps.
    assert_eq!(rows.len(), 3 * 16 * 32 * 32);
    let masked_dc = rows.iter().find(|r| r.starts_with("filtered_hpf,0,0,0,")).unwrap();
    assert_eq!(masked_dc.rsplit(',').next().unwrap().parse::<f64>().unwrap(), 0.0);

    let o = famkd(&["spectrum", "--ckpt", path_str(&teacher), "--stage", "0", "--input", path_str(&image), "--out", path_str(&csv)]);
    assert_eq!(o.status.code(), Some(1), "teacher checkpoints carry no FAM heads");
}

fn example_checkpoint() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/example/teacher.famk")
}

#[test]
fn shipped_example_reproduces_its_accuracy() {
    let ckpt = example_checkpoint();
    let side = sidecar(&ckpt);
    let got = eval_json(&ckpt);
    assert_eq!(got["top1"], side["metrics"]["top1"]);
    assert_eq!(got["top5"], side["metrics"]["top5"]);
}
