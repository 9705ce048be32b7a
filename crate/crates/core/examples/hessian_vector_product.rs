//! Exact Hessian-vector products by dual-number forward-over-reverse.
//!
//! First on a quadratic `½ θᵀAθ`, where `Hv = Av` is known in closed form,
//! then on a small network where the product is compared with a difference
//! of gradients and checked for symmetry `uᵀHv = vᵀHu`.
//!
//! ```bash
//! cargo run --release --example hessian_vector_product
//! ```

use flowprune::diffcore::{GradientVector, GraphBuilder, Tensor};
use flowprune::netmodel::{build_mlp, make_blobs, Activation};
use flowprune::Result;

fn main() -> Result<()> {
    // L(θ) = ½ θᵀAθ with A = [[2, 1], [1, 3]].
    let a = Tensor::new(vec![2, 2], vec![2.0, 1.0, 1.0, 3.0])?;
    let mut b = GraphBuilder::new(vec![vec![2]]);
    let theta = b.param(0)?;
    let row = b.reshape(theta, &[1, 2])?;
    let col = b.reshape(theta, &[2, 1])?;
    let a = b.constant(a);
    let av = b.matmul(a, col)?;
    let q = b.matmul(row, av)?;
    let q = b.sum(q);
    let loss = b.scale(q, 0.5);
    let graph = b.finish(loss);

    let theta0 = GradientVector::new(vec![Tensor::from_vec(vec![0.5, -1.0])]);
    let v = GradientVector::new(vec![Tensor::from_vec(vec![1.0, 2.0])]);
    let hv = graph.hvp(&theta0, &v)?;
    println!("quadratic: Hv = {:?} (closed form [4, 7])", hv.flatten());

    let net = build_mlp(&[4, 8, 3], Activation::Tanh, 3)?;
    let data = make_blobs(3, 4, 5, 0.4, 3)?;
    let graph = net.loss_graph(&data, 1.0)?;
    let theta = net.params();
    let u = theta.map(|x| (x * 7.0).sin());
    let v = theta.map(|x| (x * 3.0).cos());

    let (loss, g, hv) = graph.grad_and_hvp(theta, &v)?;
    let hu = graph.hvp(theta, &u)?;

    let eps = 1e-5;
    let mut plus = theta.clone();
    plus.axpy(eps, &v)?;
    let mut minus = theta.clone();
    minus.axpy(-eps, &v)?;
    let mut fd = graph.grad(&plus)?;
    fd.axpy(-1.0, &graph.grad(&minus)?)?;
    let fd = fd.scaled(0.5 / eps);

    let gap = hv.iter().zip(fd.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("mlp: loss {loss:.6}  ‖g‖² {:.6}  max |Hv - fd| {gap:.2e}", g.norm2());
    println!("mlp: uᵀHv {:.12}  vᵀHu {:.12}", u.dot(&hv)?, v.dot(&hu)?);
    Ok(())
}
