//! Finite-difference check of every parameter gradient, plus a negative
//! control with one gradient deliberately scaled.

use sesemi::gradcheck::{resolve_spec, run_gradcheck, GradcheckOptions};

pub fn run_example() -> sesemi::Result<()> {
    for name in ["mlp", "convnet-tiny"] {
        let report = run_gradcheck(&resolve_spec(name)?, &GradcheckOptions::default())?;
        print!("{}", report.to_text());
        report.into_result()?;
    }

    let faulty = GradcheckOptions {
        corrupt: Some(("block1.conv0.weight".into(), 1.01)),
        ..Default::default()
    };
    let report = run_gradcheck(&resolve_spec("convnet-tiny")?, &faulty)?;
    let caught: Vec<_> = report.failures().map(|l| l.name.as_str()).collect();
    println!("corrupted backward caught in: {caught:?}");
    assert_eq!(caught, ["block1.conv0.weight"]);
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
