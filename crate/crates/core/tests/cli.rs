mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::write_tiny_config;
use saldiff::dit::checkpoint::load_checkpoint;
use saldiff::nn::Parameters;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saldiff"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();

    let g = run(dir.path(), &["--config", cfg, "--out", out, "generate"]);
    assert_eq!(code(&g), 0, "{}", stderr(&g));
    assert!(stdout(&g).contains("train: 24\nval: 6\ntest: 5\n"));

    let t = run(dir.path(), &["--config", cfg, "--out", out, "train"]);
    assert_eq!(code(&t), 0, "{}", stderr(&t));
    assert!(Path::new(out).join("model.ckpt").is_file());

    let s = run(dir.path(), &["--config", cfg, "--out", out, "sample", "--steps", "4"]);
    assert_eq!(code(&s), 0, "{}", stderr(&s));
    let pred = Path::new(out).join("predictions/test");
    let first = fs::read(pred.join("000003.pgm")).unwrap();
    assert!(first.starts_with(b"P5\n40 24\n255\n"));
    let s2 = run(dir.path(), &["--config", cfg, "--out", out, "sample"]);
    assert_eq!(code(&s2), 0);
    assert_eq!(fs::read(pred.join("000003.pgm")).unwrap(), first);

    let e = run(dir.path(), &["--config", cfg, "--out", out, "eval"]);
    assert_eq!(code(&e), 0, "{}", stderr(&e));
    assert!(stdout(&e).contains("mean over 5"));
    let csv = fs::read_to_string(pred.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);

    fs::remove_file(pred.join("000001.pgm")).unwrap();
    fs::remove_file(pred.join("000001.f32")).unwrap();
    let e = run(dir.path(), &["--config", cfg, "--out", out, "eval"]);
    assert_eq!(code(&e), 2);
    assert!(stderr(&e).contains("000001"));

    let a = run(dir.path(), &["--config", cfg, "--out", out, "ablate", "steps"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(stdout(&a).lines().filter(|l| l.starts_with("| S=")).count(), 4);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&run(dir.path(), &[])), 1);
    assert_eq!(code(&run(dir.path(), &["--seed", "x", "generate"])), 1);
    let a = run(dir.path(), &["--config", cfg, "ablate", "noise"]);
    assert_eq!(code(&a), 1);
    assert!(stderr(&a).contains("unknown study"));

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "[model]\nwidth = 3\n").unwrap();
    let b = run(dir.path(), &["--config", bad.to_str().unwrap(), "generate"]);
    assert_eq!(code(&b), 1);
    assert!(stderr(&b).contains("width"));

    let t = Command::new(env!("CARGO_BIN_EXE_saldiff"))
        .args(["--config", cfg, "generate"])
        .current_dir(dir.path())
        .env("SALDIFF_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&t), 1);
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let t = run(dir.path(), &["--config", cfg, "--out", "nowhere", "train"]);
    assert_eq!(code(&t), 2, "{}", stderr(&t));
    let g = run(dir.path(), &["--config", cfg, "generate"]);
    assert_eq!(code(&g), 0);
    let s = run(dir.path(), &["--config", cfg, "sample"]);
    assert_eq!(code(&s), 2, "{}", stderr(&s));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let (mut maps, mut weights) = (Vec::new(), Vec::new());
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let out = out.to_str().unwrap();
        for verb in ["generate", "train", "sample"] {
            let o = Command::new(env!("CARGO_BIN_EXE_saldiff"))
                .args(["--config", cfg, "--out", out, verb])
                .current_dir(dir.path())
                .env("SALDIFF_THREADS", threads)
                .env("RUST_LOG", "warn")
                .output()
                .unwrap();
            assert_eq!(code(&o), 0, "{}", stderr(&o));
        }
        maps.push(fs::read(Path::new(out).join("predictions/test/000000.f32")).unwrap());
        let (state, _) = load_checkpoint(&Path::new(out).join("model.ckpt")).unwrap();
        weights.push(state.flatten());
    }
    assert!(maps[0] == maps[1]);
    assert!(weights[0] == weights[1]);
}
