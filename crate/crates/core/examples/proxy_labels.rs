//! The six geometric transforms that generate self-supervised labels.

use sesemi::transforms::{apply_geo, expand_proxy_batch, GeoTransform};
use sesemi::Tensor;

fn show(t: &Tensor) {
    let [_, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    for r in 0..h {
        let row: Vec<String> = (0..w).map(|c| format!("{:2}", t.data()[r * w + c])).collect();
        println!("    {}", row.join(" "));
    }
}

pub fn run_example() -> sesemi::Result<()> {
    let image = Tensor::from_fn(&[1, 3, 3], |i| i as f64);
    for t in GeoTransform::ALL {
        println!("label {} {t:?}", t.label());
        show(&apply_geo(&image, t)?);
    }

    let batch = Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64);
    let (expanded, labels) = expand_proxy_batch(&batch)?;
    println!("batch {:?} -> {:?}, labels {labels:?}", batch.shape(), expanded.shape());

    for t in GeoTransform::ALL {
        println!("{t:?} maps (1, 0.5) to {:?}", t.apply_point([1.0, 0.5]));
    }
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
