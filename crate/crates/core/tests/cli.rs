mod common;

use std::path::Path;
use std::process::Command;

use proptest::prelude::*;
use sesemi::checkpoint::Checkpoint;
use sesemi::config::{ArchSelector, DatasetKind, ExperimentConfig};
use sesemi::datasets::{write_points_csv, Dataset, Mode};
use sesemi::gradcheck::{resolve_spec, run_gradcheck, GradcheckOptions};
use sesemi::models::{build_model, ArchSpec, Branch};
use sesemi::runner::*;
use sesemi::tensor::{Graph, NormMode};
use sesemi::transforms::{Preprocessing, ZcaState};
use sesemi::{Error, RngStream, Tensor};

fn sesemi_bin(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sesemi"))
        .args(args)
        .current_dir(dir)
        .env("SESEMI_THREADS", "1")
        .output()
        .unwrap()
}

fn quick_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(DatasetKind::TwoMoons);
    cfg.n_per_class = 100;
    cfg.train.steps = Some(40);
    cfg.grid_resolution = 20;
    cfg.output_dir = out.to_path_buf();
    cfg
}

#[test]
fn config_round_trips_text() {
    for kind in [DatasetKind::TwoMoons, DatasetKind::ThreeSpirals] {
        let cfg = ExperimentConfig::defaults(kind);
        let text = cfg.serialize();
        let parsed = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.serialize(), text);
    }
    let mut cifar = ExperimentConfig::defaults(DatasetKind::Cifar10);
    cifar.data_path = Some("/data/cifar-10-batches-bin".into());
    cifar.train_subset = Some(4000);
    assert_eq!(ExperimentConfig::parse(&cifar.serialize()).unwrap(), cifar);
}

proptest! {
    #[test]
    fn config_round_trip_property(
        w in 0.0f64..10.0,
        lr in 1e-5f64..1.0,
        wd in 0.0f64..1e-2,
        seed in any::<u64>(),
        steps in proptest::option::of(2usize..100_000),
        translate in 0usize..4,
        noise in 0.0f64..1.0,
        mode in prop_oneof![Just(Mode::Supervised), Just(Mode::Asl), Just(Mode::Ssl)],
    ) {
        let mut cfg = ExperimentConfig::defaults(DatasetKind::ThreeSpirals);
        cfg.train.w = w;
        cfg.train.base_lr = lr;
        cfg.train.weight_decay = wd;
        cfg.train.seed = seed;
        cfg.train.steps = steps;
        cfg.train.mode = mode;
        cfg.train.augment.max_translate = translate;
        cfg.train.augment.noise_sigma = noise;
        cfg.arch = ArchSelector::Mlp;
        let text = cfg.serialize();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.serialize(), text);
    }
}

#[test]
fn unknown_config_key_names_key_and_line() {
    let text = "# sweep\ndataset = two_moons\n\nconsistency_weight = 1.0\n";
    match ExperimentConfig::parse(text) {
        Err(e @ Error::Config { line: 4, .. }) => {
            assert!(e.to_string().contains("consistency_weight"));
            assert!(e.to_string().contains('4'));
            assert_eq!(e.exit_code(), 1);
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        ExperimentConfig::parse("dataset = two_moons\nw = lots\n"),
        Err(Error::Config { line: 2, .. })
    ));
}

fn trained_convnet() -> Checkpoint {
    let spec = ArchSpec::convnet_tiny(3);
    let mut model = build_model(&spec, &mut RngStream::new(1)).unwrap();
    let mut rng = RngStream::new(2);
    let x = Tensor::from_fn(&[6, 3, 8, 8], |_| rng.normal());
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let xv = g.constant(x.clone());
    model.forward(&mut g, &bound, xv, Branch::Supervised, &mut rng).unwrap();
    model.set_mode(NormMode::Eval);
    model.round_to_f32();
    let zca = ZcaState::fit(&x, 1e-2).unwrap();
    Checkpoint {
        model,
        preprocessing: Preprocessing { gcn: true, zca: Some(zca) },
    }
}

#[test]
fn checkpoint_round_trips_predictions_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let ckpt = trained_convnet();
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let mut rng = RngStream::new(9);
    let x = Tensor::from_fn(&[10, 3, 8, 8], |_| rng.normal());
    let a = ckpt.model.logits(&ckpt.preprocessing.apply(&x).unwrap(), Branch::Supervised).unwrap();
    let b = back.model.logits(&back.preprocessing.apply(&x).unwrap(), Branch::Supervised).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes());
    assert_eq!(&std::fs::read(&path).unwrap()[..4], b"SSMI");
}

#[test]
fn corrupted_checkpoints_are_format_errors() {
    let bytes = trained_convnet().to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(Checkpoint::from_bytes(&longer), Err(Error::Format { .. })));
    let mut version = bytes;
    version[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Format { offset: 4, .. })));
}

#[test]
fn decision_grid_lattice() {
    let mut m = build_model(&ArchSpec::mlp(2, 3), &mut RngStream::new(0)).unwrap();
    m.set_mode(NormMode::Eval);
    let csv = export_decision_grid(&m, [0.0, 1.0, 0.0, 1.0], 3).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "x,y,pred,prob_0,prob_1,prob_2");
    assert_eq!(lines.len(), 10);
    let mut coords = Vec::new();
    for l in &lines[1..] {
        let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
        coords.push((f[0], f[1]));
        let probs = &f[3..];
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let best = probs.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(probs[f[2] as usize], best);
    }
    let mut expected = Vec::new();
    for y in [0.0, 0.5, 1.0] {
        for x in [0.0, 0.5, 1.0] {
            expected.push((x, y));
        }
    }
    assert_eq!(coords, expected);

    let mut conv = build_model(&ArchSpec::convnet_tiny(3), &mut RngStream::new(0)).unwrap();
    conv.set_mode(NormMode::Eval);
    assert!(matches!(export_decision_grid(&conv, [0.0, 1.0, 0.0, 1.0], 3), Err(Error::Contract(_))));
}

/// An MLP wired by hand to output class 1 exactly when x > 0.
fn sign_model() -> Checkpoint {
    let mut m = build_model(&ArchSpec::mlp(2, 2), &mut RngStream::new(0)).unwrap();
    for p in m.params_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let set = |m: &mut sesemi::models::DualHeadModel, name: &str, idx: usize, v: f64| {
        m.param_mut(name).unwrap().value.data_mut()[idx] = v;
    };
    set(&mut m, "hidden0.weight", 0, 1.0);
    set(&mut m, "hidden0.weight", 1, -1.0);
    for layer in ["hidden1.weight", "hidden2.weight"] {
        set(&mut m, layer, 0, 1.0);
        set(&mut m, layer, 101, 1.0);
    }
    set(&mut m, "sup_head.weight", 1, 1.0);
    set(&mut m, "sup_head.weight", 3, -1.0);
    m.set_mode(NormMode::Eval);
    Checkpoint {
        model: m,
        preprocessing: Preprocessing::default(),
    }
}

#[test]
fn eval_of_oracle_model_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("sign.ckpt");
    sign_model().save(&ckpt_path).unwrap();
    let mut rng = RngStream::new(3);
    let mut data = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..200 {
        let x = (0.01 + rng.uniform()) * if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        data.extend([x, rng.normal()]);
        targets.push(usize::from(x > 0.0));
    }
    let d = Dataset::new(Tensor::new(vec![200, 2], data).unwrap(), targets, 2).unwrap();
    let csv = dir.path().join("points.csv");
    write_points_csv(&d, &csv).unwrap();
    assert_eq!(run_eval(&ckpt_path, "points", &csv).unwrap(), 0.0);

    let out = sesemi_bin(&["eval", "sign.ckpt", "two_moons", "points.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout), "0.0000\n");
}

#[test]
fn untrained_model_error_is_chance() {
    let (n, c) = (2000, 10);
    let mut m = build_model(&ArchSpec::mlp(2, c), &mut RngStream::new(5)).unwrap();
    m.set_mode(NormMode::Eval);
    let ckpt = Checkpoint {
        model: m,
        preprocessing: Preprocessing::default(),
    };
    let mut rng = RngStream::new(6);
    let x = Tensor::from_fn(&[n, 2], |_| rng.normal());
    let mut targets: Vec<usize> = (0..n).map(|i| i % c).collect();
    rng.shuffle(&mut targets);
    let d = Dataset::new(x, targets, c).unwrap();
    let err = evaluate(&ckpt, &d).unwrap();
    let p = 1.0 - 1.0 / c as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((err - p).abs() <= 3.0 * sigma, "error {err}, band {p} ± {}", 3.0 * sigma);
}

#[test]
fn eval_rejects_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("conv.ckpt");
    trained_convnet().save(&path).unwrap();
    let csv = dir.path().join("p.csv");
    write_points_csv(&sesemi::datasets::two_moons(5, 0.1, 0).unwrap(), &csv).unwrap();
    match run_eval(&path, "points", &csv) {
        Err(e @ Error::Dimension(_)) => assert!(e.to_string().contains("expects")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn run_train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = quick_config(&out);
    let run = run_train(&cfg).unwrap();
    for f in [METRICS_FILE, EPOCHS_FILE, CHECKPOINT_FILE, GRID_FILE, MANIFEST_FILE, TEST_POINTS_FILE] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let manifest = std::fs::read_to_string(out.join(MANIFEST_FILE)).unwrap();
    assert!(manifest.contains("seed = 0"));
    assert!(manifest.contains("wall_time_seconds"));
    assert!(manifest.contains(&cfg.serialize()));
    let grid = std::fs::read_to_string(out.join(GRID_FILE)).unwrap();
    assert_eq!(grid.lines().count(), 401);
    let reloaded = Checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(reloaded.model, run.checkpoint.model);
    let err = run_eval(&out.join(CHECKPOINT_FILE), "two_moons", &out.join(TEST_POINTS_FILE)).unwrap();
    assert_eq!(err, run.final_test_error());
}

#[test]
fn same_config_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_train(&quick_config(&a)).unwrap();
    run_train(&quick_config(&b)).unwrap();
    for f in [METRICS_FILE, EPOCHS_FILE, CHECKPOINT_FILE, GRID_FILE] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let cfg = quick_config(&blocker.join("run"));
    assert!(matches!(run_train(&cfg), Err(Error::Io { .. })));
}

#[test]
fn gradcheck_negative_control_names_the_layer() {
    let spec = resolve_spec("mlp").unwrap();
    let opts = GradcheckOptions {
        corrupt: Some(("hidden1.weight".into(), 0.999)),
        ..Default::default()
    };
    let report = run_gradcheck(&spec, &opts).unwrap();
    let names: Vec<&str> = report.failures().map(|l| l.name.as_str()).collect();
    assert_eq!(names, ["hidden1.weight"]);
    match report.into_result() {
        Err(e @ Error::Numerical(_)) => {
            assert!(e.to_string().contains("hidden1.weight"));
            assert_eq!(e.exit_code(), 3);
        }
        other => panic!("{other:?}"),
    }
    assert!(resolve_spec("resnet").is_err());
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = sesemi_bin(&["gradcheck", "convnet-tiny", "--seed", "2"], d);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));

    assert_eq!(sesemi_bin(&[], d).status.code(), Some(1));
    assert_eq!(sesemi_bin(&["demo", "mnist"], d).status.code(), Some(1));
    assert_eq!(sesemi_bin(&["--help"], d).status.code(), Some(0));

    std::fs::write(d.join("bad.cfg"), "dataset = two_moons\nconsistency_weight = 1\n").unwrap();
    let out = sesemi_bin(&["train", "bad.cfg"], d);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("consistency_weight"), "{err}");

    std::fs::write(d.join("junk.ckpt"), b"NOPE and more bytes").unwrap();
    std::fs::write(d.join("p.csv"), "x,y,label\n0,0,0\n").unwrap();
    let out = sesemi_bin(&["eval", "junk.ckpt", "points", "p.csv"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());

    std::fs::write(
        d.join("diverge.cfg"),
        "dataset = two_moons\nbase_lr = 1e12\nmomentum = 0\nsteps = 30\noutput_dir = diverge\n",
    )
    .unwrap();
    assert_eq!(sesemi_bin(&["train", "diverge.cfg"], d).status.code(), Some(3));

    let out = Command::new(env!("CARGO_BIN_EXE_sesemi"))
        .args(["gradcheck", "mlp"])
        .env("SESEMI_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn binary_train_and_demo_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.cfg"),
        "dataset = three_spirals\nn_per_class = 50\nsteps = 30\ngrid_resolution = 5\noutput_dir = out\n",
    )
    .unwrap();
    let out = sesemi_bin(&["train", "run.cfg"], d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("out").join(GRID_FILE).is_file());
    let out = sesemi_bin(&["eval", "out/model.ckpt", "three_spirals", "out/test.csv"], d);
    let text = String::from_utf8_lossy(&out.stdout).trim().to_string();
    assert_eq!(text.len(), 6, "{text}");
    assert!(text.parse::<f64>().is_ok());

    let out = sesemi_bin(&["demo", "two_moons", "--mode", "supervised", "--seed", "1", "--out", "demo"], d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [METRICS_FILE, EPOCHS_FILE, CHECKPOINT_FILE, GRID_FILE] {
        assert!(d.join("demo").join(f).is_file());
    }
    let manifest = std::fs::read_to_string(d.join("demo").join(MANIFEST_FILE)).unwrap();
    assert!(manifest.contains("mode = supervised") && manifest.contains("seed = 1"));
}
