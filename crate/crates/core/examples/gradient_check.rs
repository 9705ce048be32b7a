//! Reverse-mode gradients checked against central finite differences.
//!
//! Builds a tanh MLP and a ReLU CNN on a few blob samples, differentiates the
//! temperature-scaled cross-entropy and compares every component with a
//! two-sided difference quotient.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use flowprune::diffcore::{fd_step, Graph, GradientVector};
use flowprune::netmodel::{build_cnn, build_mlp, make_blobs, Activation, CnnSpec, Network};
use flowprune::Result;

fn finite_difference(graph: &Graph, theta: &GradientVector) -> Result<GradientVector> {
    let mut out = GradientVector::zeros_like(theta);
    let mut p = theta.clone();
    for i in 0..theta.numel() {
        let x = theta.get(i).unwrap();
        let h = fd_step(x);
        p.set(i, x + h);
        let up = graph.evaluate(&p)?;
        p.set(i, x - h);
        let down = graph.evaluate(&p)?;
        p.set(i, x);
        out.set(i, (up - down) / (2.0 * h));
    }
    Ok(out)
}

fn report(name: &str, net: &Network, dims: usize) -> Result<()> {
    let data = make_blobs(3, dims, 4, 0.5, 1)?;
    let graph = net.loss_graph(&data, 2.0)?;
    let (loss, grad) = graph.value_and_grad(net.params())?;
    let fd = finite_difference(&graph, net.params())?;
    let worst = grad.iter().zip(fd.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = grad.iter().map(f64::abs).fold(0.0, f64::max);
    println!(
        "{name:<10} params {:>4}  loss {loss:.6}  max |ad - fd| {worst:.2e}  relative {:.2e}",
        net.parameter_count(),
        worst / scale
    );
    Ok(())
}

fn main() -> Result<()> {
    let mlp = build_mlp(&[6, 10, 8, 3], Activation::Tanh, 0)?;
    report("mlp-tanh", &mlp, 6)?;

    let spec = CnnSpec { input: [1, 4, 4], channels: vec![4, 6], kernel: 3, classes: 3, activation: Activation::Relu };
    let cnn = build_cnn(&spec, 0)?;
    report("cnn-relu", &cnn, 16)?;
    Ok(())
}
