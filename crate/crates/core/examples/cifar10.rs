//! CIFAR-10 training from the binary batch format.
//!
//! Point `SESEMI_CIFAR10_DIR` at a directory holding `data_batch_{1..5}.bin`
//! and `test_batch.bin` to train on the real data (a 4000-image subset with
//! 400 labels). Without it a small synthetic dataset in the same format is
//! written to a temporary directory and a few steps are run on it, with
//! ZCA skipped (fitting the 3072×3072 map takes a while).

use std::path::{Path, PathBuf};

use sesemi::config::{DatasetKind, ExperimentConfig};
use sesemi::datasets::{write_cifar_file, Dataset, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES};
use sesemi::runner::{run_eval, run_train, CHECKPOINT_FILE};
use sesemi::{RngStream, Tensor};

fn synthetic_batch(n: usize, rng: &mut RngStream) -> sesemi::Result<Dataset> {
    let targets: Vec<usize> = (0..n).map(|_| rng.below(10)).collect();
    let mut data = Vec::with_capacity(n * 3072);
    for &t in &targets {
        for c in 0..3 {
            for r in 0..32 {
                for col in 0..32 {
                    let stripe = ((r + col * t) / 4 + c) % 2;
                    let level = 0.25 + 0.5 * stripe as f64 + 0.05 * rng.normal();
                    data.push((level.clamp(0.0, 1.0) * 255.0).round() / 255.0);
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, targets, 10)
}

fn write_synthetic(dir: &Path) -> sesemi::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| sesemi::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut rng = RngStream::new(3);
    for f in CIFAR_TRAIN_FILES {
        write_cifar_file(&synthetic_batch(40, &mut rng)?, &dir.join(f))?;
    }
    write_cifar_file(&synthetic_batch(40, &mut rng)?, &dir.join(CIFAR_TEST_FILE))
}

pub fn run_example() -> sesemi::Result<()> {
    let scratch = std::env::temp_dir().join("sesemi-examples").join("cifar10");
    let real = std::env::var_os("SESEMI_CIFAR10_DIR").map(PathBuf::from);
    let mut cfg = ExperimentConfig::defaults(DatasetKind::Cifar10);
    cfg.output_dir = scratch.join("run");
    match &real {
        Some(dir) => {
            cfg.data_path = Some(dir.clone());
            cfg.train_subset = Some(4000);
            cfg.num_labeled = 400;
            cfg.train.epochs = 10;
        }
        None => {
            let dir = scratch.join("data");
            write_synthetic(&dir)?;
            cfg.data_path = Some(dir);
            cfg.train_subset = Some(80);
            cfg.num_labeled = 20;
            cfg.train.batch_size = 4;
            cfg.train.steps = Some(3);
            cfg.zca = false;
        }
    }
    print!("{}", cfg.serialize());
    let run = run_train(&cfg)?;
    println!(
        "step 0 supervised loss {:.4} (ln 10 = {:.4})",
        run.metrics.steps[0].loss_super,
        10f64.ln()
    );
    let data = cfg.data_path.as_ref().unwrap();
    let err = run_eval(&cfg.output_dir.join(CHECKPOINT_FILE), "cifar10", data)?;
    println!("test error {err:.4}");
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
