use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use progalign::curriculum::CurriculumSchedule;
use progalign::data_io::{read_pseudo_labels, Config};
use progalign::rehearse_pipeline::{initial_schedule, PipelineData};

const SMALL: &str = "\
classes = 6
stages = 2
synth.samples = 12
synth.anchors = 4
epochs.source = 1
epochs.step1 = 1
epochs.step2 = 1
batch = 32
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_progalign"));
    c.env_remove("PROGALIGN_CONFIG");
    c
}

fn run(args: &[&str], cfg: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn progalign")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("small.cfg");
    fs::write(&p, SMALL).unwrap();
    p
}

#[test]
fn run_all_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["run-all", "--seed", "7"], &cfg, out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["manifest.json", "final.ckpt", "metrics.csv", "predictions.lbl", "schedule.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let m: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "run-all");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["checkpoint"], "final.ckpt");
}

#[test]
fn stage_commands_match_run_all() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&["run-all"], &cfg, &a).status.success());
    for cmd in ["synth", "pretrain-source", "pseudo-label", "schedule", "train", "infer", "evaluate"] {
        let o = run(&[cmd], &cfg, &b);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["final.ckpt", "pseudo_labels.plbl", "schedule.txt", "predictions.lbl", "evaluation.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn resume_from_stage_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&["run-all"], &cfg, &a).status.success());
    for cmd in ["pretrain-source", "pseudo-label", "schedule"] {
        assert!(run(&[cmd], &cfg, &b).status.success());
    }
    assert!(run(&["train", "--stop-after", "1"], &cfg, &b).status.success());
    let ck = b.join("checkpoints/stage1.ckpt");
    let o = run(&["train", "--resume", ck.to_str().unwrap()], &cfg, &b);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(b.join("final.ckpt")).unwrap());
}

#[test]
fn schedule_lists_clusters_in_descending_score() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = small_config(dir.path());
    let out = dir.path().join("o");
    for cmd in ["pretrain-source", "pseudo-label"] {
        assert!(run(&[cmd], &cfg_path, &out).status.success());
    }
    let o = run(&["schedule"], &cfg_path, &out);
    assert!(o.status.success());
    let printed = String::from_utf8(o.stdout).unwrap();
    let sched = CurriculumSchedule::from_text(&printed).unwrap();
    assert_eq!(sched.stages(), 2);
    let ordered: Vec<f64> = sched.order.iter().map(|&c| sched.scores[c]).collect();
    assert!(ordered.windows(2).all(|w| w[0] >= w[1]), "{ordered:?}");

    // same schedule as the library builds from the same labels
    let cfg = Config::load(&cfg_path).unwrap();
    let (data, _) = PipelineData::<f32>::synthetic(&cfg).unwrap();
    let labels = read_pseudo_labels(&out.join("pseudo_labels.plbl")).unwrap();
    let expect = initial_schedule(&cfg, &data, &labels).unwrap();
    assert_eq!(sched.clusters, expect.clusters);
    assert_eq!(sched.order, expect.order);
}

#[test]
fn evaluate_without_checkpoint_fails_with_status_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = run(&["evaluate"], &cfg, &dir.path().join("empty"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint not found"));
}

#[test]
fn usage_errors_exit_1() {
    let o = bin().args(["run-all", "--no-such-flag"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "tau = 0.6\nwarp = 9\n").unwrap();
    let o = run(&["synth"], &bad, &dir.path().join("o"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warp"));
}

#[test]
fn config_path_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("o");
    let o = bin()
        .args(["synth", "--out"])
        .arg(&out)
        .env("PROGALIGN_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(o.status.success());
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert!(m["config"].as_str().unwrap().contains("classes = 6"));
    // images and labels for two sources and the target
    assert_eq!(m["files"].as_array().unwrap().len(), 6);
}
