//! Numerical checks of the gradient-flow identities.
//!
//! Along `dθ/dt = −g(θ)`:
//!
//! - `dL/dt = −‖g‖²`
//! - `d‖θ‖²/dt = −2 θᵀg`
//! - `d²‖θ‖²/dt² = 2(‖g‖² + θᵀHg)`
//! - `‖θ(T) − θ(0)‖² / T ≤ L(0) − L(T)`
//!
//! Trace derivatives are taken with central differences, so each identity
//! residual shrinks as `O(h²)` and is checked by halving `h`. The SGD
//! counterparts are checked by exhaustive enumeration over minibatches.

use std::io::Write;

use serde::{Deserialize, Serialize};
use schemars::JsonSchema;

use crate::diffcore::{add_scaled, GradientVector, Graph};
use crate::error::{invalid, Error, Result};
use crate::netmodel::{Dataset, Network};

/// Largest number of minibatches the expectation checks will enumerate.
pub const DEFAULT_ENUMERATION_CAP: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    Rk4,
}

impl Integrator {
    pub fn name(self) -> &'static str {
        match self {
            Integrator::Euler => "euler",
            Integrator::Rk4 => "rk4",
        }
    }
}

/// A differentiable objective with a starting point and a parameter → layer map.
#[derive(Clone, Debug)]
pub struct FlowProblem {
    pub graph: Graph,
    pub theta0: GradientVector,
    pub layer_of_param: Vec<usize>,
    pub layers: usize,
}

impl FlowProblem {
    pub fn new(graph: Graph, theta0: GradientVector, layer_of_param: Vec<usize>) -> Result<Self> {
        if layer_of_param.len() != theta0.numel() {
            return Err(invalid("layer map length differs from parameter count"));
        }
        let layers = layer_of_param.iter().map(|&l| l + 1).max().unwrap_or(0);
        Ok(Self { graph, theta0, layer_of_param, layers })
    }

    /// Whole-parameter problem with every entry assigned to one layer.
    pub fn single_layer(graph: Graph, theta0: GradientVector) -> Result<Self> {
        let n = theta0.numel();
        Self::new(graph, theta0, vec![0; n])
    }

    /// Full-batch cross-entropy of `network` on `data`, starting at its current parameters.
    pub fn from_network(network: &Network, data: &Dataset, temperature: f64) -> Result<Self> {
        Self::new(network.loss_graph(data, temperature)?, network.params().clone(), network.layer_of_params())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSample {
    pub t: f64,
    pub loss: f64,
    pub norm2: f64,
    pub theta_g: f64,
    pub grad_norm2: f64,
    pub theta_hg: f64,
    pub layer_grad_norm2: Vec<f64>,
}

impl FlowSample {
    fn is_finite(&self) -> bool {
        [self.t, self.loss, self.norm2, self.theta_g, self.grad_norm2, self.theta_hg].iter().all(|x| x.is_finite())
            && self.layer_grad_norm2.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrace {
    pub samples: Vec<FlowSample>,
    pub step: f64,
    pub integrator: Integrator,
    /// Parameters at every sample point.
    pub states: Vec<GradientVector>,
}

impl FlowTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// CSV with columns `t,L,norm2,theta_g,grad_norm2,theta_Hg,layer0_grad_norm2,…`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let layers = self.samples.first().map_or(0, |s| s.layer_grad_norm2.len());
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> =
            ["t", "L", "norm2", "theta_g", "grad_norm2", "theta_Hg"].iter().map(|s| s.to_string()).collect();
        header.extend((0..layers).map(|l| format!("layer{l}_grad_norm2")));
        wr.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![
                s.t.to_string(),
                s.loss.to_string(),
                s.norm2.to_string(),
                s.theta_g.to_string(),
                s.grad_norm2.to_string(),
                s.theta_hg.to_string(),
            ];
            row.extend(s.layer_grad_norm2.iter().map(|v| v.to_string()));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn sample(problem: &FlowProblem, theta: &GradientVector, t: f64) -> Result<(FlowSample, GradientVector)> {
    let (loss, g) = problem.graph.value_and_grad(theta)?;
    let (_, _, hg) = problem.graph.grad_and_hvp(theta, &g)?;
    let mut layer = vec![0.0; problem.layers];
    for (gi, &l) in g.iter().zip(&problem.layer_of_param) {
        layer[l] += gi * gi;
    }
    let s = FlowSample {
        t,
        loss,
        norm2: theta.norm2(),
        theta_g: theta.dot(&g)?,
        grad_norm2: g.norm2(),
        theta_hg: theta.dot(&hg)?,
        layer_grad_norm2: layer,
    };
    Ok((s, g))
}

/// Integrate `dθ/dt = −g(θ)` for `steps` steps of size `step`, sampling
/// every trace quantity at each of the `steps + 1` time points.
pub fn integrate_flow(problem: &FlowProblem, step: f64, steps: usize, integrator: Integrator) -> Result<FlowTrace> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid(format!("step must be positive, got {step}")));
    }
    let mut trace = FlowTrace { samples: Vec::with_capacity(steps + 1), step, integrator, states: Vec::with_capacity(steps + 1) };
    let mut theta = problem.theta0.clone();
    for k in 0..=steps {
        let t = k as f64 * step;
        let (s, g) = sample(problem, &theta, t)?;
        if !s.is_finite() || !theta.is_finite() {
            return Err(Error::FlowAborted { step: k, what: "non-finite trace quantity".into(), prefix: Box::new(trace) });
        }
        trace.samples.push(s);
        trace.states.push(theta.clone());
        if k == steps {
            break;
        }
        theta = match integrator {
            Integrator::Euler => add_scaled(&theta, -step, &g)?,
            Integrator::Rk4 => {
                let grad = |p: &GradientVector| problem.graph.grad(p);
                let k2 = grad(&add_scaled(&theta, -0.5 * step, &g)?)?;
                let k3 = grad(&add_scaled(&theta, -0.5 * step, &k2)?)?;
                let k4 = grad(&add_scaled(&theta, -step, &k3)?)?;
                let mut next = theta.clone();
                next.axpy(-step / 6.0, &g)?;
                next.axpy(-step / 3.0, &k2)?;
                next.axpy(-step / 3.0, &k3)?;
                next.axpy(-step / 6.0, &k4)?;
                next
            }
        };
    }
    Ok(trace)
}

/// Convenience wrapper over [`integrate_flow`] for a network on a full batch.
pub fn integrate_network_flow(
    network: &Network,
    data: &Dataset,
    step: f64,
    steps: usize,
    integrator: Integrator,
) -> Result<FlowTrace> {
    integrate_flow(&FlowProblem::from_network(network, data, 1.0)?, step, steps, integrator)
}

fn interior(trace: &FlowTrace) -> Result<std::ops::Range<usize>> {
    if trace.samples.len() < 3 {
        return Err(invalid("identity checks need at least 3 samples"));
    }
    Ok(1..trace.samples.len() - 1)
}

/// Max over interior points of `|Δ_c ‖θ‖²/Δt + 2θᵀg| / (1 + |2θᵀg|)`.
pub fn check_first_identity(trace: &FlowTrace) -> Result<f64> {
    let s = &trace.samples;
    let h = trace.step;
    Ok(interior(trace)?
        .map(|k| {
            let d = (s[k + 1].norm2 - s[k - 1].norm2) / (2.0 * h);
            let rhs = -2.0 * s[k].theta_g;
            (d - rhs).abs() / (1.0 + rhs.abs())
        })
        .fold(0.0, f64::max))
}

/// Max over interior points of `|Δ²_c ‖θ‖²/Δt² − 2(‖g‖² + θᵀHg)| / (1 + |2(‖g‖² + θᵀHg)|)`.
pub fn check_second_identity(trace: &FlowTrace) -> Result<f64> {
    let s = &trace.samples;
    let h = trace.step;
    Ok(interior(trace)?
        .map(|k| {
            let d2 = (s[k + 1].norm2 - 2.0 * s[k].norm2 + s[k - 1].norm2) / (h * h);
            let rhs = 2.0 * (s[k].grad_norm2 + s[k].theta_hg);
            (d2 - rhs).abs() / (1.0 + rhs.abs())
        })
        .fold(0.0, f64::max))
}

/// Max over interior points of `|Δ_c L/Δt + ‖g‖²| / (1 + ‖g‖²)`.
pub fn check_loss_rate(trace: &FlowTrace) -> Result<f64> {
    let s = &trace.samples;
    let h = trace.step;
    Ok(interior(trace)?
        .map(|k| {
            let d = (s[k + 1].loss - s[k - 1].loss) / (2.0 * h);
            (d + s[k].grad_norm2).abs() / (1.0 + s[k].grad_norm2)
        })
        .fold(0.0, f64::max))
}

/// Minimum over samples with `t > 0` of `(L(0) − L(t)) − ‖θ(t) − θ(0)‖² / t`.
pub fn check_loss_bound(trace: &FlowTrace, init: &GradientVector) -> Result<f64> {
    let first = trace.samples.first().ok_or_else(|| invalid("empty trace"))?;
    let mut worst = f64::INFINITY;
    for (s, theta) in trace.samples.iter().zip(&trace.states).skip(1) {
        let d = add_scaled(theta, -1.0, init)?.norm2();
        worst = worst.min((first.loss - s.loss) - d / s.t);
    }
    if worst == f64::INFINITY {
        return Err(invalid("loss bound needs at least one sample after t = 0"));
    }
    Ok(worst)
}

/// `log2(r(h) / r(h/2))` for consecutive residuals of a halving sequence.
pub fn observed_orders(residuals: &[f64]) -> Vec<f64> {
    residuals.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub step: f64,
    pub first: f64,
    pub second: f64,
    pub loss_rate: f64,
    pub bound_margin: f64,
}

/// Residuals of every identity for a sequence of step sizes at fixed horizon.
pub fn convergence_study(problem: &FlowProblem, steps: &[f64], horizon: f64, integrator: Integrator) -> Result<Vec<ConvergenceRow>> {
    steps
        .iter()
        .map(|&h| {
            let n = (horizon / h).round() as usize;
            let trace = integrate_flow(problem, h, n, integrator)?;
            Ok(ConvergenceRow {
                step: h,
                first: check_first_identity(&trace)?,
                second: check_second_identity(&trace)?,
                loss_rate: check_loss_rate(&trace)?,
                bound_margin: check_loss_bound(&trace, &problem.theta0)?,
            })
        })
        .collect()
}

/// Minibatch losses for the expectation checks, plus the full-batch loss.
#[derive(Clone, Debug)]
pub struct ExpectationProblem {
    pub full: Graph,
    pub batches: Vec<Graph>,
    pub theta: GradientVector,
}

impl ExpectationProblem {
    /// Partition `data` into `m` equal minibatches.
    pub fn from_network(network: &Network, data: &Dataset, m: usize) -> Result<Self> {
        let parts = data.partition(m)?;
        let used: Vec<usize> = (0..parts.len() * parts[0].len()).collect();
        let full = network.loss_graph(&data.subset(&used)?, 1.0)?;
        let batches = parts.iter().map(|p| network.loss_graph(p, 1.0)).collect::<Result<_>>()?;
        Ok(Self { full, batches, theta: network.params().clone() })
    }
}

/// `‖b‖² − ‖a‖²` summed as `Σ (bᵢ − aᵢ)(bᵢ + aᵢ)`.
fn norm2_change(a: &GradientVector, b: &GradientVector) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |acc, (x, y)| acc + (y - x) * (y + x))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectationResult {
    pub order: u8,
    pub rate: f64,
    /// `E[Δ‖θ‖²]/η` or `E[Δ²‖θ‖²]/η²` over all enumerated choices.
    pub expectation: f64,
    /// `−2θᵀg` or `2(‖g‖² + θᵀHg)` from the full batch.
    pub flow_value: f64,
    pub residual: f64,
}

/// Exhaustive check of the SGD expectations against their gradient-flow values.
///
/// Order 1 enumerates every single step `θ − η dᵢ`; order 2 enumerates every
/// ordered pair `(i, j)` of consecutive steps.
pub fn sgd_expectation_check(problem: &ExpectationProblem, rate: f64, order: u8, cap: usize) -> Result<ExpectationResult> {
    let m = problem.batches.len();
    if m == 0 {
        return Err(invalid("no minibatches"));
    }
    if m > cap {
        return Err(invalid(format!("{m} minibatches exceed the enumeration cap {cap}")));
    }
    if !(rate > 0.0) {
        return Err(invalid(format!("rate must be positive, got {rate}")));
    }
    let theta = &problem.theta;
    let g = problem.full.grad(theta)?;
    let d: Vec<GradientVector> = problem.batches.iter().map(|b| b.grad(theta)).collect::<Result<_>>()?;
    let (expectation, flow_value) = match order {
        1 => {
            let e = d
                .iter()
                .map(|di| Ok(norm2_change(theta, &add_scaled(theta, -rate, di)?) / rate))
                .sum::<Result<f64>>()?
                / m as f64;
            (e, -2.0 * theta.dot(&g)?)
        }
        2 => {
            let (_, _, hg) = problem.full.grad_and_hvp(theta, &g)?;
            let mut acc = 0.0;
            for di in &d {
                let t1 = add_scaled(theta, -rate, di)?;
                let first = norm2_change(theta, &t1);
                for b in &problem.batches {
                    let t2 = add_scaled(&t1, -rate, &b.grad(&t1)?)?;
                    acc += (norm2_change(&t1, &t2) - first) / (rate * rate);
                }
            }
            (acc / (m * m) as f64, 2.0 * (g.norm2() + theta.dot(&hg)?))
        }
        _ => return Err(invalid(format!("order must be 1 or 2, got {order}"))),
    };
    Ok(ExpectationResult { order, rate, expectation, flow_value, residual: (expectation - flow_value).abs() })
}
