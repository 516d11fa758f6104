use std::fs;
use std::path::Path;
use std::process::Command;

use afopt::config::{OptimizerChoice, RunConfig};
use afopt::neural::ModelSize;
use afopt::{adapt::StepMode, Error};
use afopt_cli::*;

fn base(dir: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.scenes = dir.join("scenes");
    c.out = dir.join("out");
    c.count = 3;
    c.duration = 0.5;
    c.rtf_runs = 0;
    c.threads = 1;
    c
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            v.extend(tree(&p));
        } else {
            v.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    v.sort();
    v
}

#[test]
fn generate_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let mut c = base(t.path());
    c.seed = 7;
    assert_eq!(cmd_generate(&c).unwrap().len(), 3);
    let first = tree(&c.scenes);
    fs::remove_dir_all(&c.scenes).unwrap();
    cmd_generate(&c).unwrap();
    assert_eq!(tree(&c.scenes), first);
    assert!(c.scenes.join("config.txt").is_file());
}

#[test]
fn generate_gsc_writes_microphones() {
    let t = tempfile::tempdir().unwrap();
    let mut c = base(t.path());
    c.task = "gsc".parse().unwrap();
    c.count = 2;
    for d in cmd_generate(&c).unwrap() {
        let mics = fs::read_dir(d.join("mics")).unwrap().count();
        assert_eq!(mics, 4);
    }
}

#[test]
fn null_model_gives_zero_erle_and_eval_is_repeatable() {
    let t = tempfile::tempdir().unwrap();
    let mut c = base(t.path());
    cmd_generate(&c).unwrap();
    c.optimizer = OptimizerChoice::Null;
    let a = cmd_eval(&c).unwrap();
    assert!(a.erle_db.unwrap().abs() < 1e-9, "{a:?}");
    let b = cmd_eval(&c).unwrap();
    assert_eq!(a, b);
    let csv = fs::read_to_string(c.out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(c.out.join("report.json").is_file() && c.out.join("config.txt").is_file());
}

#[test]
fn zero_rate_training_is_flat_and_resume_continues() {
    let t = tempfile::tempdir().unwrap();
    let mut c = base(t.path());
    c.count = 4;
    cmd_generate(&c).unwrap();
    c.train.lr = 0.0;
    c.train.max_epochs = 1;
    c.train.batch = 2;
    c.train.max_trunc = 16;
    let s = cmd_train(&c).unwrap();
    assert_eq!((s.train_scenes, s.val_scenes), (3, 1));
    let log = fs::read_to_string(c.out.join("train_log.csv")).unwrap();
    let vals: Vec<f64> = log
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(3).and_then(|v| v.parse().ok()))
        .collect();
    assert_eq!(vals.len(), 2);
    assert_eq!(vals[0], vals[1]);
    let first_rows = log.lines().count() - 1;

    c.ckpt = Some(c.out.join("best.ckpt"));
    let r = cmd_train(&c).unwrap();
    assert!((r.best_metric - s.best_metric).abs() < 1e-6);
    let log = fs::read_to_string(c.out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch")).count(), 1);
    // the resumed run appends the same number of rows as the first one
    assert_eq!(log.lines().count(), 1 + 2 * first_rows);
}

#[test]
fn checkpoint_geometry_mismatch_is_a_config_error() {
    let t = tempfile::tempdir().unwrap();
    let mut c = base(t.path());
    c.count = 2;
    cmd_generate(&c).unwrap();
    c.train.max_epochs = 1;
    c.train.max_trunc = 16;
    cmd_train(&c).unwrap();
    c.ckpt = Some(c.out.join("best.ckpt"));
    c.blocks = 4;
    let err = cmd_eval(&c).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
    assert_eq!(exit_code(&err), exit::CONFIG);
}

#[test]
fn bench_reports_every_cell_and_round_trips() {
    let t = tempfile::tempdir().unwrap();
    let mut c = base(t.path());
    c.count = 2;
    cmd_generate(&c).unwrap();
    c.train.max_epochs = 1;
    c.train.max_trunc = 16;
    let ck = t.path().join("ckpts");
    fs::create_dir_all(&ck).unwrap();
    for mode in [StepMode::P, StepMode::PU] {
        c.mode = mode;
        let s = cmd_train(&c).unwrap();
        fs::copy(&s.checkpoint, cell_checkpoint(&ck, ModelSize::S, 'S', mode)).unwrap();
    }
    c.bench_sizes = vec![ModelSize::S, ModelSize::M];
    c.bench_modes = vec![StepMode::P, StepMode::PU];
    c.bench_losses = vec!['S'];
    c.ckpt = Some(ck);
    let rows = cmd_bench(&c).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r.status == "missing").count(), 2);
    assert!(rows.iter().filter(|r| r.size == "S").all(|r| r.metric.is_some()));
    let back = read_scaling_csv(&c.out.join("scaling.csv")).unwrap();
    assert_eq!(back, rows);
}

#[test]
fn binary_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_afopt");
    let run = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(run(&["eval", "--task", "gsc", "--size", "kf"]), Some(exit::CONFIG));
    assert_eq!(run(&["eval", "--set", "bogus=1"]), Some(exit::CONFIG));
    let missing = t.path().join("nothing");
    assert_eq!(run(&["eval", "--size", "nlms", "--scenes", missing.to_str().unwrap()]), Some(exit::IO));
    let scenes = t.path().join("s");
    let out = t.path().join("o");
    let ok = run(&["generate", "--seed", "3", "--scenes", scenes.to_str().unwrap(), "--set", "count=1", "--set", "duration=0.5"]);
    assert_eq!(ok, Some(exit::OK));
    let ok = run(&["eval", "--size", "nlms", "--mode", "P", "--scenes", scenes.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", "rtf_runs=0"]);
    assert_eq!(ok, Some(exit::OK));
    let cfg = RunConfig::from_text(&fs::read_to_string(out.join("config.txt")).unwrap()).unwrap();
    assert_eq!(cfg.optimizer, OptimizerChoice::Nlms);
}
