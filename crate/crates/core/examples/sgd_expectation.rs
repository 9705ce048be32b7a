//! SGD steps agree with gradient flow in expectation, up to O(η).
//!
//! With the data split into 4 equal minibatches, every possible single step
//! (order 1) and every ordered pair of steps (order 2) is enumerated. The
//! averaged change of `‖θ‖²` is compared with its flow value, and the
//! residual halves with the learning rate.
//!
//! ```bash
//! cargo run --release --example sgd_expectation
//! ```

use flowprune::flowlab::{sgd_expectation_check, ExpectationProblem, DEFAULT_ENUMERATION_CAP};
use flowprune::netmodel::{build_mlp, make_blobs, Activation};
use flowprune::Result;

fn main() -> Result<()> {
    let data = make_blobs(4, 6, 25, 0.3, 0)?;
    let net = build_mlp(&[6, 12, 4], Activation::Tanh, 0)?;
    let problem = ExpectationProblem::from_network(&net, &data, 4)?;

    for order in [1, 2] {
        let mut last = None;
        for rate in [1e-3, 5e-4, 2.5e-4] {
            let r = sgd_expectation_check(&problem, rate, order, DEFAULT_ENUMERATION_CAP)?;
            let ratio = last.map(|l: f64| format!("  ratio {:.4}", l / r.residual)).unwrap_or_default();
            println!(
                "order {order}  η {rate:<7} E {:+.8}  flow {:+.8}  residual {:.3e}{ratio}",
                r.expectation, r.flow_value, r.residual
            );
            last = Some(r.residual);
        }
    }
    Ok(())
}
