//! The tape: build a small network by hand and read its gradients.

use sesemi::tensor::ActivationKind;
use sesemi::{Graph, Tensor};

pub fn run_example() -> sesemi::Result<()> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]));
    let w = g.param(Tensor::from_rows(&[&[0.3, -0.1, 0.2], &[0.05, 0.4, -0.3]]));
    let b = g.param(Tensor::new(vec![3], vec![0.0, 0.1, -0.1])?);

    let h = g.matmul(x, w)?;
    let h = g.add_bias(h, b)?;
    let h = g.activation(h, ActivationKind::LeakyRelu(0.1))?;
    let loss = g.softmax_cross_entropy(h, &[2, 0])?;
    println!("loss = {:.6}", g.value(loss).item());

    let grads = g.backward(loss)?;
    println!("dL/dW = {:?}", grads.get(w).unwrap().data());
    println!("dL/db = {:?}", grads.get(b).unwrap().data());
    println!("x is a constant: {}", grads.get(x).is_none());
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
