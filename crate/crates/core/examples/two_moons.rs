//! Two moons with 5 labels per class: supervised baseline vs SESEMI.
//!
//! ```bash
//! cargo run --release --example two_moons
//! ```

use sesemi::config::DatasetKind;
use sesemi::datasets::Mode;
use sesemi::runner::{demo_config, run_train, GRID_FILE};

pub fn run_example() -> sesemi::Result<()> {
    let out = std::env::temp_dir().join("sesemi-examples").join("two_moons");
    let mut errors = Vec::new();
    for mode in [Mode::Supervised, Mode::Ssl] {
        let cfg = demo_config(DatasetKind::TwoMoons, mode, 0, Some(out.join(mode.to_string())))?;
        let run = run_train(&cfg)?;
        println!(
            "{mode:>10}: {} steps, test error {:.4}, grid at {}",
            run.metrics.steps.len(),
            run.final_test_error(),
            cfg.output_dir.join(GRID_FILE).display()
        );
        errors.push(run.final_test_error());
    }
    println!("accuracy gain from unlabeled data: {:+.1} points", 100.0 * (errors[0] - errors[1]));
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
