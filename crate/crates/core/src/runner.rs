//! End-to-end experiment driver: data loading, preprocessing, training,
//! artifact writing and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetKind, ExperimentConfig};
use crate::datasets::{
    load_cifar10_subset, load_cifar10_test, make_split, read_points_csv, three_spirals, two_moons, write_points_csv,
    Dataset, Mode,
};
use crate::error::{Error, Result};
use crate::models::DualHeadModel;
use crate::rng::RngStream;
use crate::training::{streams, train_sesemi, RunMetrics};
use crate::transforms::Preprocessing;

pub const METRICS_FILE: &str = "metrics.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const GRID_FILE: &str = "grid.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TEST_POINTS_FILE: &str = "test.csv";

/// Margin added around the training points when choosing grid bounds.
pub const GRID_MARGIN: f64 = 0.5;

/// Everything a finished run produced.
#[derive(Debug)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub metrics: RunMetrics,
    pub output_dir: PathBuf,
    pub wall_seconds: f64,
}

impl RunOutput {
    pub fn final_test_error(&self) -> f64 {
        self.metrics.final_test_error().unwrap_or(f64::NAN)
    }
}

/// Train and test sets for a config, before preprocessing.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let root = RngStream::new(cfg.train.seed);
    let train_seed = root.split(streams::TRAIN_DATA).next_u64();
    let test_seed = root.split(streams::TEST_DATA).next_u64();
    let (train, test) = match cfg.dataset {
        DatasetKind::TwoMoons => (
            two_moons(cfg.n_per_class, cfg.noise, train_seed)?,
            two_moons(cfg.n_per_class, cfg.noise, test_seed)?,
        ),
        DatasetKind::ThreeSpirals => (
            three_spirals(cfg.n_per_class, cfg.noise, train_seed)?,
            three_spirals(cfg.n_per_class, cfg.noise, test_seed)?,
        ),
        DatasetKind::Cifar10 => {
            let dir = cfg
                .data_path
                .as_deref()
                .ok_or_else(|| Error::Parameter("cifar10 requires `data_path`".into()))?;
            return load_cifar10_subset(dir, cfg.train_subset, cfg.test_subset);
        }
    };
    let train = match cfg.train_subset {
        Some(n) => train.take(n)?,
        None => train,
    };
    let test = match cfg.test_subset {
        Some(n) => test.take(n)?,
        None => test,
    };
    Ok((train, test))
}

/// Runs one experiment in memory without touching the filesystem.
pub fn train_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let (train, test) = load_data(cfg)?;
    let pre = Preprocessing::fit(&train.inputs, cfg.gcn, cfg.zca.then_some(cfg.zca_epsilon))?;
    let (train, test) = if pre.is_identity() {
        (train, test)
    } else {
        let tr = pre.apply(&train.inputs)?;
        let te = pre.apply(&test.inputs)?;
        (train.with_inputs(tr)?, test.with_inputs(te)?)
    };
    let spec = cfg
        .arch
        .build(train.example_shape(), train.num_classes, cfg.dropout)?;
    let split = make_split(&train, test, cfg.num_labeled, cfg.train.mode, cfg.train.seed)?;
    let (model, metrics) = train_sesemi(&split, &spec, &cfg.train)?;
    Ok(RunOutput {
        checkpoint: Checkpoint {
            model,
            preprocessing: pre,
        },
        metrics,
        output_dir: cfg.output_dir.clone(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains and writes `metrics.csv`, `epochs.csv`, `model.ckpt`, a run
/// manifest and, for 2-D data, `grid.csv` and `test.csv`.
pub fn run_train(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let out = train_experiment(cfg)?;
    write(&dir.join(METRICS_FILE), out.metrics.steps_csv())?;
    write(&dir.join(EPOCHS_FILE), out.metrics.epochs_csv())?;
    out.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    let model = &out.checkpoint.model;
    if model.spec().input_shape == [2] {
        let (train, test) = load_data(cfg)?;
        let bounds = grid_bounds(&train);
        write(
            &dir.join(GRID_FILE),
            export_decision_grid(model, bounds, cfg.grid_resolution)?,
        )?;
        write_points_csv(&test, &dir.join(TEST_POINTS_FILE))?;
    }
    write(&dir.join(MANIFEST_FILE), manifest(cfg, &out))?;
    Ok(out)
}

/// Reads a config file and runs it.
pub fn run_train_file(path: &Path) -> Result<RunOutput> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    run_train(&ExperimentConfig::parse(&text)?)
}

fn manifest(cfg: &ExperimentConfig, out: &RunOutput) -> String {
    let mut s = String::new();
    let m = &out.metrics;
    writeln!(s, "sesemi {}", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(s, "seed = {}", cfg.train.seed).unwrap();
    writeln!(s, "steps = {}", m.steps.len()).unwrap();
    writeln!(s, "parameters = {}", out.checkpoint.model.num_parameters()).unwrap();
    writeln!(s, "final_test_error = {:.4}", out.final_test_error()).unwrap();
    writeln!(s, "wall_time_seconds = {:.3}", out.wall_seconds).unwrap();
    writeln!(s, "precision = f64 training, f32 checkpoint parameters").unwrap();
    writeln!(s, "weight_decay_scope = weights only (no biases or batch-norm affine terms)").unwrap();
    writeln!(s, "\n[config]").unwrap();
    s.push_str(&cfg.serialize());
    s
}

/// Bounding box `[x_min, x_max, y_min, y_max]` of 2-D points plus
/// [`GRID_MARGIN`] on every side.
pub fn grid_bounds(points: &Dataset) -> [f64; 4] {
    let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for p in points.inputs.data().chunks(2) {
        b[0] = b[0].min(p[0]);
        b[1] = b[1].max(p[0]);
        b[2] = b[2].min(p[1]);
        b[3] = b[3].max(p[1]);
    }
    [b[0] - GRID_MARGIN, b[1] + GRID_MARGIN, b[2] - GRID_MARGIN, b[3] + GRID_MARGIN]
}

fn lattice(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
    if n == 1 {
        (lo + hi) / 2.0
    } else {
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    }
}

/// Supervised-head predictions over a `resolution`² lattice spanning
/// `[x_min, x_max] × [y_min, y_max]`, as CSV rows `x,y,pred,prob_0..`.
/// Rows run over x fastest, then y.
pub fn export_decision_grid(
    model: &DualHeadModel,
    [x0, x1, y0, y1]: [f64; 4],
    resolution: usize,
) -> Result<String> {
    if model.spec().input_shape != [2] {
        return Err(Error::Contract(format!(
            "decision grids need a 2-D input model, got input shape {:?}",
            model.spec().input_shape
        )));
    }
    if resolution == 0 || !(x0 <= x1 && y0 <= y1) {
        return Err(Error::Parameter(format!(
            "bad grid: resolution {resolution}, bounds {:?}",
            [x0, x1, y0, y1]
        )));
    }
    let mut points = Vec::with_capacity(resolution * resolution * 2);
    for j in 0..resolution {
        for i in 0..resolution {
            points.push(lattice(x0, x1, resolution, i));
            points.push(lattice(y0, y1, resolution, j));
        }
    }
    let x = crate::Tensor::new(vec![resolution * resolution, 2], points)?;
    let probs = model.probabilities(&x)?;
    let c = model.spec().num_classes;
    let mut s = String::from("x,y,pred");
    for k in 0..c {
        write!(s, ",prob_{k}").unwrap();
    }
    s.push('\n');
    for r in 0..x.outer() {
        let p = x.slice_outer(r);
        let pr = probs.slice_outer(r);
        write!(s, "{},{},{}", p[0], p[1], crate::models::argmax_class(pr)).unwrap();
        for v in pr {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

/// Error rate of a checkpoint on a dataset. `dataset` is `cifar10` (with
/// `path` the batch directory; the test batch is used) or `two_moons`,
/// `three_spirals` or `points` (with `path` an `x,y,label` CSV).
pub fn run_eval(checkpoint: &Path, dataset: &str, path: &Path) -> Result<f64> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let classes = ckpt.model.spec().num_classes;
    let data = match dataset {
        "cifar10" => load_cifar10_test(path)?,
        "two_moons" | "three_spirals" | "points" => read_points_csv(path, Some(classes))?,
        other => {
            return Err(Error::Parameter(format!(
                "unknown dataset `{other}` (expected cifar10, two_moons, three_spirals or points)"
            )))
        }
    };
    evaluate(&ckpt, &data)
}

/// Error rate of a checkpoint on an in-memory dataset.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset) -> Result<f64> {
    let spec = ckpt.model.spec();
    if data.example_shape() != spec.input_shape.as_slice() || data.num_classes != spec.num_classes
    {
        return Err(Error::Dimension(format!(
            "checkpoint expects {:?} inputs with {} classes, dataset has {:?} with {}",
            spec.input_shape,
            spec.num_classes,
            data.example_shape(),
            data.num_classes
        )));
    }
    let x = ckpt.preprocessing.apply(&data.inputs)?;
    ckpt.model.error_rate(&x, &data.targets)
}

/// Config for the built-in demo on a synthetic dataset.
pub fn demo_config(
    dataset: DatasetKind,
    mode: Mode,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<ExperimentConfig> {
    if !dataset.is_synthetic() {
        return Err(Error::Parameter(format!(
            "the demo runs on two_moons or three_spirals, not {dataset}"
        )));
    }
    let mut cfg = ExperimentConfig::defaults(dataset);
    cfg.train.mode = mode;
    cfg.train.seed = seed;
    cfg.output_dir = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{dataset}-{mode}")));
    Ok(cfg)
}
