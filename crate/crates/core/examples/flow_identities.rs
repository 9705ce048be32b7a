//! Gradient-flow traces and the identities that hold along them.
//!
//! Integrates `dθ/dt = −g(θ)` for a small MLP with RK4 and forward Euler,
//! then measures how fast the residuals of
//!
//! - `d‖θ‖²/dt = −2θᵀg`
//! - `d²‖θ‖²/dt² = 2(‖g‖² + θᵀHg)`
//! - `dL/dt = −‖g‖²`
//!
//! shrink as the step halves. Central differences on RK4 traces converge at
//! order 2; Euler traces cap them at order 1. The bound
//! `‖θ(T) − θ(0)‖²/T ≤ L(0) − L(T)` is reported as its worst margin.
//!
//! ```bash
//! cargo run --release --example flow_identities
//! ```

use flowprune::flowlab::{convergence_study, observed_orders, FlowProblem, Integrator};
use flowprune::netmodel::{build_mlp, make_blobs, Activation};
use flowprune::Result;

fn main() -> Result<()> {
    let data = make_blobs(4, 6, 25, 0.3, 0)?;
    let net = build_mlp(&[6, 12, 4], Activation::Tanh, 0)?;
    let problem = FlowProblem::from_network(&net, &data, 1.0)?;
    let steps = [1e-2, 5e-3, 2.5e-3];

    for integrator in [Integrator::Rk4, Integrator::Euler] {
        let rows = convergence_study(&problem, &steps, 0.5, integrator)?;
        println!("{}:", integrator.name());
        for r in &rows {
            println!(
                "  h {:<7} first {:.3e}  second {:.3e}  loss rate {:.3e}  bound margin {:+.3e}",
                r.step, r.first, r.second, r.loss_rate, r.bound_margin
            );
        }
        let first = observed_orders(&rows.iter().map(|r| r.first).collect::<Vec<_>>());
        let second = observed_orders(&rows.iter().map(|r| r.second).collect::<Vec<_>>());
        println!("  observed orders: first {first:.3?}  second {second:.3?}");
    }
    Ok(())
}
