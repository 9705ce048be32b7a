//! Dense tensors and reverse-mode differentiation with exact
//! Hessian-vector products.

mod graph;
mod params;
mod real;
mod tensor;

pub use graph::{Graph, GraphBuilder, NodeId};
pub use params::{add_scaled, dot, GradientVector};
pub use real::{Dual, Real};
pub use tensor::Tensor;

use crate::error::Result;

/// Scalar output `L(θ)`.
pub fn evaluate(graph: &Graph, params: &GradientVector) -> Result<f64> {
    graph.evaluate(params)
}

/// `∂L/∂θ` for every parameter.
pub fn grad(graph: &Graph, params: &GradientVector) -> Result<GradientVector> {
    graph.grad(params)
}

/// `H(θ)·v`, exact.
pub fn hvp(graph: &Graph, params: &GradientVector, v: &GradientVector) -> Result<GradientVector> {
    graph.hvp(params, v)
}

/// Central finite-difference step for component value `x`.
///
/// The cube root of machine epsilon balances the O(h²) truncation error of a
/// central difference against its O(ε/h) round-off.
pub fn fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * (1.0 + x.abs())
}
