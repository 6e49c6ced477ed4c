//! Drive a run from config text, then reload the checkpoint and confirm
//! it predicts exactly what the trained model predicted.

use sesemi::checkpoint::Checkpoint;
use sesemi::config::ExperimentConfig;
use sesemi::runner::{load_data, run_train, CHECKPOINT_FILE};

const CONFIG: &str = "
# two moons, self-supervised on the whole training set
dataset = two_moons
mode = ssl
num_labeled = 10
steps = 500
seed = 11
";

pub fn run_example() -> sesemi::Result<()> {
    let mut cfg = ExperimentConfig::parse(CONFIG)?;
    cfg.output_dir = std::env::temp_dir().join("sesemi-examples").join("config");
    assert_eq!(ExperimentConfig::parse(&cfg.serialize())?, cfg);

    let run = run_train(&cfg)?;
    let loaded = Checkpoint::load(&cfg.output_dir.join(CHECKPOINT_FILE))?;
    let (_, test) = load_data(&cfg)?;
    let before = run.checkpoint.model.probabilities(&test.inputs)?;
    let after = loaded.model.probabilities(&test.inputs)?;
    println!(
        "test error {:.4}; reloaded probabilities identical: {}",
        run.final_test_error(),
        before == after
    );
    assert_eq!(before, after);
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
