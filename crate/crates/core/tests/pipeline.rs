mod common;

use std::fs;

use saldiff::app::{self, pgm, Study, CONFIG_FILE};
use saldiff::config::{RunConfig, Split};
use saldiff::diffusion::{train_step, validation_loss, AdamW};
use saldiff::dit::checkpoint::{load_checkpoint, save_checkpoint};
use saldiff::dit::DenoiserState;
use saldiff::features::record::{load_split, read_manifest};
use saldiff::nn::Parameters;
use saldiff::metrics::auc_judd;
use saldiff::numerics::{SeededRng, Tensor};
use saldiff::Error;

use common::tiny;

#[test]
fn default_generation_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.paths.output = dir.path().to_path_buf();
    let counts = app::generate(&cfg).unwrap();
    assert_eq!(counts, vec![(Split::Train, 2000), (Split::Val, 200), (Split::Test, 200)]);
    for (split, n) in counts {
        assert_eq!(read_manifest(&cfg.paths.split_dir(split)).unwrap().len(), n);
    }
}

#[test]
fn generation_is_deterministic_and_lossless() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, cb) = (tiny(a.path()), tiny(b.path()));
    app::generate(&ca).unwrap();
    app::generate(&cb).unwrap();
    for split in Split::ALL {
        let (da, db) = (ca.paths.split_dir(split), cb.paths.split_dir(split));
        assert_eq!(
            fs::read(da.join("manifest.txt")).unwrap(),
            fs::read(db.join("manifest.txt")).unwrap()
        );
        for p in read_manifest(&da).unwrap() {
            let name = p.file_name().unwrap();
            assert_eq!(fs::read(&p).unwrap(), fs::read(db.join(name)).unwrap());
        }
        // reading back reproduces the in-memory samples
        assert_eq!(load_split(&da).unwrap(), app::generate_split(&ca, split).unwrap());
    }
    let other = {
        let mut c = tiny(b.path());
        c.set_seed(1);
        app::generate_split(&c, Split::Train).unwrap()
    };
    assert_ne!(other, app::generate_split(&ca, Split::Train).unwrap());
}

#[test]
fn train_sample_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    app::generate(&cfg).unwrap();
    let out = app::train(&cfg).unwrap();
    assert_eq!(out.report.epochs.len(), 2);
    let log = fs::read_to_string(&out.log).unwrap();
    assert_eq!(log.lines().count(), 3);
    let (state, embedded) = load_checkpoint(&out.checkpoint).unwrap();
    assert_eq!(state.cfg, cfg.model);
    assert_eq!(RunConfig::from_text(&embedded).unwrap(), cfg);
    assert_eq!(
        RunConfig::load(&dir.path().join(CONFIG_FILE)).unwrap(),
        cfg
    );

    let first = app::sample(&cfg).unwrap();
    assert_eq!(first.count, 5);
    let pgm0 = fs::read(first.dir.join("000000.pgm")).unwrap();
    assert!(pgm0.starts_with(b"P5\n40 24\n255\n"));
    assert_eq!(pgm0.len(), 13 + 960);
    let snapshot: Vec<Vec<u8>> = (0..5)
        .map(|i| fs::read(first.dir.join(format!("{i:06}.pgm"))).unwrap())
        .collect();
    app::sample(&cfg).unwrap();
    for (i, bytes) in snapshot.iter().enumerate() {
        assert_eq!(&fs::read(first.dir.join(format!("{i:06}.pgm"))).unwrap(), bytes);
    }
    // the sidecar agrees with the PGM up to 8-bit quantisation
    let raw = pgm::decode_f32(&fs::read(first.dir.join("000000.f32")).unwrap(), 24, 40).unwrap();
    let q = pgm::decode_pgm(&pgm0).unwrap();
    assert!(raw.max_abs_diff(&q).unwrap() <= 0.5 / 255.0 + 1e-7);

    let ev = app::eval(&cfg, None, Split::Test).unwrap();
    assert_eq!(ev.rows.len(), 5);
    let csv = fs::read_to_string(&ev.csv).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 + 1);

    // a different seed samples different maps
    cfg.set_seed(3);
    cfg.paths.predictions = "pred-seed3".into();
    let err = app::sample(&cfg).unwrap_err();
    // the dataset belongs to seed 0
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn sample_refuses_mismatched_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    app::generate(&cfg).unwrap();
    app::train(&cfg).unwrap();
    let mut other = cfg.clone();
    other.model.fusion = saldiff::sitr::FusionStrategy::Concatenate;
    other.train.learning_rate = 0.5;
    let err = app::sample(&other).unwrap_err().to_string();
    assert!(err.contains("[model] fusion: concatenate != sitr"), "{err}");
    assert!(err.contains("[train] learning_rate: 0.5 != 0.001"), "{err}");
    // sampling knobs may change freely
    let mut steps = cfg.clone();
    steps.steps = 2;
    app::sample(&steps).unwrap();
}

#[test]
fn eval_ground_truth_constant_and_missing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    app::generate(&cfg).unwrap();
    let test = load_split(&cfg.paths.split_dir(Split::Test)).unwrap();

    let gt_dir = dir.path().join("gt");
    fs::create_dir_all(&gt_dir).unwrap();
    for (i, s) in test.iter().enumerate() {
        fs::write(gt_dir.join(format!("{i:06}.f32")), pgm::encode_f32(&s.gt_map)).unwrap();
    }
    let ev = app::eval(&cfg, Some(&gt_dir), Split::Test).unwrap();
    // Fixations are drawn from the blob itself, so tail fixations rank below
    // the blob core. Continuous limit: AUC = 1 - 2*pi*sigma^2 / (H*W).
    let d = &cfg.data;
    let expect = 1.0 - 2.0 * std::f64::consts::PI * d.sigma * d.sigma / (d.map_h * d.map_w) as f64;
    let mut auc = 0.0;
    for ((_, s), sample) in ev.rows.iter().zip(&test) {
        assert!((s.sim.unwrap() - 1.0).abs() < 1e-6);
        assert!((s.cc.unwrap() - 1.0).abs() < 1e-6);
        let a = s.auc_j.unwrap();
        assert!((a - auc_judd(&sample.gt_map, &sample.fixations).unwrap()).abs() < 1e-6);
        assert!(a > 0.9, "self AUC {a}");
        auc += a / test.len() as f64;
    }
    assert!(auc > expect - 0.02, "mean self AUC {auc} vs {expect}");
    assert!(ev.degenerate.is_empty());

    let flat = dir.path().join("flat");
    fs::create_dir_all(&flat).unwrap();
    for i in 0..test.len() {
        let m = Tensor::full(&[24, 40], 0.5);
        fs::write(flat.join(format!("{i:06}.pgm")), pgm::encode_pgm(&m).unwrap()).unwrap();
    }
    let ev = app::eval(&cfg, Some(&flat), Split::Test).unwrap();
    assert_eq!(ev.degenerate.len(), test.len());
    let csv = fs::read_to_string(&ev.csv).unwrap();
    assert_eq!(csv.lines().count(), test.len() + 2);
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[2], "degenerate");
        assert_eq!(cells[3], "degenerate");
        assert_eq!(cells[4], "0.500000");
    }

    fs::remove_file(flat.join("000002.pgm")).unwrap();
    fs::remove_file(flat.join("000004.pgm")).unwrap();
    let err = app::eval(&cfg, Some(&flat), Split::Test).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let msg = err.to_string();
    assert!(msg.contains("000002") && msg.contains("000004") && !msg.contains("000003"), "{msg}");
}

#[test]
fn checkpoint_resume_matches_on_frozen_batch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let train = app::generate_split(&cfg, Split::Train).unwrap();
    let sched = cfg.train.schedule().unwrap();
    let mut state = DenoiserState::init(&cfg.model, 0).unwrap();
    let mut opt = AdamW::new(cfg.train.learning_rate, cfg.train.weight_decay);
    let mut rng = SeededRng::new(0);
    let batch: Vec<_> = train.iter().take(8).collect();
    for _ in 0..3 {
        train_step(&batch, &mut state, &mut opt, &sched, &mut rng, &cfg.train).unwrap();
    }
    // checkpoints store f32, so compare against the rounded weights
    let mut rounded = state.clone();
    let flat: Vec<f64> = rounded.flatten().iter().map(|&v| v as f32 as f64).collect();
    rounded.assign_flat(&flat);

    let path = dir.path().join("resume.ckpt");
    save_checkpoint(&path, &state, &cfg.to_text()).unwrap();
    let (loaded, _) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.flatten(), rounded.flatten());
    let frozen = &train[8..16];
    assert_eq!(
        validation_loss(frozen, &loaded, &sched, &cfg.train).unwrap(),
        validation_loss(frozen, &rounded, &sched, &cfg.train).unwrap()
    );
    // continuing from either copy takes the same step
    let (mut a, mut b) = (loaded, rounded);
    let (mut oa, mut ob) = (opt.clone(), opt);
    let (mut ra, mut rb) = (rng.clone(), rng);
    let la = train_step(&batch, &mut a, &mut oa, &sched, &mut ra, &cfg.train).unwrap();
    let lb = train_step(&batch, &mut b, &mut ob, &sched, &mut rb, &cfg.train).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.flatten(), b.flatten());
}

#[test]
fn longer_training_lowers_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train_samples = 64;
    cfg.train.epochs = 6;
    cfg.train.learning_rate = 3e-3;
    app::generate(&cfg).unwrap();
    let out = app::train(&cfg).unwrap();
    let e = &out.report.epochs;
    assert!(e.last().unwrap().val_loss < e[0].val_loss, "{e:?}");
}

#[test]
fn numeric_failure_keeps_failed_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.learning_rate = 1e200;
    cfg.train.weight_decay = 0.0;
    cfg.train.grad_clip = 0.0;
    app::generate(&cfg).unwrap();
    let err = app::train(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    let failed = dir.path().join("model.ckpt.failed");
    assert!(failed.is_file());
}

#[test]
fn steps_and_fusion_ablations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    app::generate(&cfg).unwrap();

    let steps = app::ablate(&cfg, Study::Steps).unwrap();
    assert_eq!(steps.rows.len(), 4);
    assert_eq!(steps.arms(), vec!["S=2", "S=4", "S=8", "S=16"]);
    assert!(steps.rows.iter().filter(|r| r.reference).all(|r| r.arm == "S=4"));
    assert!(cfg.paths.checkpoint_path().is_file());

    let fusion = app::ablate(&cfg, Study::Fusion).unwrap();
    assert_eq!(
        fusion.arms(),
        vec!["sitr", "concatenate", "repeat_add", "repeat_average"]
    );
    let sitr: Vec<_> = fusion.rows.iter().filter(|r| r.arm == "sitr").collect();
    assert!(sitr.iter().all(|r| r.reference));
    assert!(fusion.rows.iter().filter(|r| r.arm != "sitr").all(|r| !r.reference));
    let md = fs::read_to_string(dir.path().join("ablate/fusion.md")).unwrap();
    assert!(md.contains("| sitr (reference) |"));
    let csv = fs::read_to_string(dir.path().join("ablate/fusion.csv")).unwrap();
    // one row per arm and seed plus one mean per arm
    assert_eq!(csv.lines().count(), 1 + 4 * 2);

    // a second run reuses the arm checkpoints and reproduces the table
    let again = app::ablate(&cfg, Study::Fusion).unwrap();
    assert_eq!(again, fusion);
    // the decoupled sitr arm is shared with the conditioning study
    let cond = app::ablate(&cfg, Study::Conditioning).unwrap();
    assert_eq!(
        cond.mean("decoupled").unwrap(),
        fusion.mean("sitr").unwrap()
    );
}
