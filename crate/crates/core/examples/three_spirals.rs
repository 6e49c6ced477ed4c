//! Three interleaved spirals in all three training modes.
//!
//! `asl` adds the proxy task on the labeled points only, `ssl` on the whole
//! training set.

use sesemi::config::{DatasetKind, ExperimentConfig};
use sesemi::datasets::Mode;
use sesemi::runner::train_experiment;

pub fn run_example() -> sesemi::Result<()> {
    for mode in [Mode::Supervised, Mode::Asl, Mode::Ssl] {
        let mut cfg = ExperimentConfig::defaults(DatasetKind::ThreeSpirals);
        cfg.train.mode = mode;
        cfg.train.steps = Some(2000);
        let run = train_experiment(&cfg)?;
        let first = &run.metrics.steps[0];
        println!(
            "{mode:>10}: loss {:.3} -> {:.3}, test error {:.4}",
            first.loss_total,
            run.metrics.steps.last().unwrap().loss_total,
            run.final_test_error()
        );
    }
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
