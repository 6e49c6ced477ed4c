#![allow(dead_code)]

use sesemi::{Graph, Result, RngStream, Tensor, Var};

pub fn random_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Norm-wise relative error between two gradient vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

/// Compares autodiff gradients of a scalar function of `inputs` against
/// central finite differences. Returns the worst per-input relative error.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, build: F) -> Vec<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();

    let mut errs = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap().data().to_vec();
        let mut numeric = vec![0.0; t.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        errs.push(rel_err(&analytic, &numeric));
    }
    errs
}

/// Weighted sum `Σ w_i · y_i` of a node with fixed random weights, so that
/// every output element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let n = g.value(y).len();
    let mut rng = RngStream::new(seed);
    let w = Tensor::from_fn(&[n, 1], |_| rng.normal());
    let w = g.constant(w);
    let flat = g.reshape(y, &[1, n])?;
    let s = g.matmul(flat, w)?;
    g.sum(s)
}

use sesemi::datasets::{make_split, two_moons, Dataset, Mode, SplitDataset};
use sesemi::models::{ArchSpec, Param};
use sesemi::training::{train_sesemi_observed, TrainConfig};

/// Small CIFAR-shaped 8×8 image dataset whose class sets the mean colour.
pub fn tiny_images(n: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed);
    let targets: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * 192);
    for &t in &targets {
        for c in 0..3 {
            for _ in 0..64 {
                data.push(if c == t % 3 { 1.0 } else { 0.0 } + 0.3 * rng.normal());
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 3, 8, 8], data).unwrap(), targets, classes).unwrap()
}

pub fn moons_split(mode: Mode, seed: u64) -> SplitDataset {
    let train = two_moons(500, 0.1, seed).unwrap();
    let test = two_moons(100, 0.1, seed + 1).unwrap();
    make_split(&train, test, 10, mode, seed).unwrap()
}

/// Parameter values after every step of a run.
pub fn trajectory(split: &SplitDataset, spec: &ArchSpec, cfg: &TrainConfig) -> Vec<Vec<Param>> {
    let mut out = Vec::new();
    train_sesemi_observed(split, spec, cfg, &mut |_, m| out.push(m.params().to_vec())).unwrap();
    out
}
