//! Global contrast normalization and ZCA whitening of correlated data.

use sesemi::transforms::{gcn, ZcaState};
use sesemi::{RngStream, Tensor};

fn covariance(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.outer(), x.inner_len());
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.slice_outer(i)[j]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let row = x.slice_outer(i);
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (row[a] - mean[a]) * (row[b] - mean[b]) / n as f64;
            }
        }
    }
    cov
}

fn off_identity(cov: &[f64], d: usize) -> f64 {
    (0..d * d)
        .map(|k| (cov[k] - if k / d == k % d { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

pub fn run_example() -> sesemi::Result<()> {
    let (n, d) = (1000, 8);
    let mut rng = RngStream::new(7);
    let mixing = Tensor::from_fn(&[d, d], |_| rng.normal());
    let latent = Tensor::from_fn(&[n, d], |_| rng.normal());
    let x = latent.matmul(&mixing)?;

    let zca = ZcaState::fit(&x, 1e-9)?;
    let white = zca.apply(&x)?;
    println!("max |cov - I| before: {:.3}", off_identity(&covariance(&x), d));
    println!("max |cov - I| after:  {:.2e}", off_identity(&covariance(&white), d));

    let normed = gcn(&x);
    let row = normed.slice_outer(0);
    println!(
        "gcn row 0: mean {:.1e}, norm {:.12}",
        row.iter().sum::<f64>() / d as f64,
        row.iter().map(|v| v * v).sum::<f64>().sqrt()
    );
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
