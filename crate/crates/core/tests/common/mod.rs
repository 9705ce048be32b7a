//! Oracles and fixtures shared by the integration and acceptance tests.

#![allow(dead_code)]

use std::path::PathBuf;

use flowprune::cli::{load_config, ExperimentConfig};
use flowprune::diffcore::{fd_step, Graph, GradientVector};
use flowprune::importance::{GroupScore, ImportanceReport, Measure};
use flowprune::masking::Mask;
use flowprune::netmodel::{build_cnn, build_mlp, make_blobs, Activation, CnnSpec, Dataset, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

pub fn bundled(name: &str) -> ExperimentConfig {
    load_config(&config_path(name), None, &[]).expect("bundled config loads")
}

/// Gradient by central differences, one component at a time.
pub fn fd_grad(graph: &Graph, params: &GradientVector) -> GradientVector {
    let mut out = GradientVector::zeros_like(params);
    let mut p = params.clone();
    for i in 0..params.numel() {
        let x = params.get(i).unwrap();
        let h = fd_step(x);
        p.set(i, x + h);
        let up = graph.evaluate(&p).unwrap();
        p.set(i, x - h);
        let down = graph.evaluate(&p).unwrap();
        p.set(i, x);
        out.set(i, (up - down) / (2.0 * h));
    }
    out
}

/// Hessian-vector product by central differences of the gradient along `v`.
pub fn fd_hvp(graph: &Graph, params: &GradientVector, v: &GradientVector, eps: f64) -> GradientVector {
    let mut plus = params.clone();
    plus.axpy(eps, v).unwrap();
    let mut minus = params.clone();
    minus.axpy(-eps, v).unwrap();
    let gp = graph.grad(&plus).unwrap();
    let gm = graph.grad(&minus).unwrap();
    let mut out = gp;
    out.axpy(-1.0, &gm).unwrap();
    out.scaled(0.5 / eps)
}

/// `‖a − b‖∞ / ‖a‖∞`, with the denominator floored at `1e-12`.
pub fn rel_err(a: &GradientVector, b: &GradientVector) -> f64 {
    let diff = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().map(f64::abs).fold(0.0, f64::max).max(1e-12);
    diff / scale
}

pub fn gaussian_like(like: &GradientVector, std: f64, rng: &mut ChaCha8Rng) -> GradientVector {
    let n = Normal::new(0.0, std).unwrap();
    let flat: Vec<f64> = (0..like.numel()).map(|_| n.sample(rng)).collect();
    GradientVector::unflatten(like, &flat).unwrap()
}

/// One instance of the layer zoo: a network, a batch and a temperature.
pub struct ZooInstance {
    pub label: &'static str,
    pub network: Network,
    pub data: Dataset,
    pub temperature: f64,
}

/// Small random networks cycling through dense/conv and tanh/relu, with
/// parameters moved off their initialization so biases and σ are generic.
pub fn zoo_instance(i: u64) -> ZooInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
    let activation = if i.is_multiple_of(2) { Activation::Tanh } else { Activation::Relu };
    let classes = 3;
    let (label, mut network, dims) = if (i / 2).is_multiple_of(2) {
        let label = if activation == Activation::Tanh { "dense-tanh" } else { "dense-relu" };
        (label, build_mlp(&[5, 7, 6, classes], activation, i).unwrap(), 5)
    } else {
        let label = if activation == Activation::Tanh { "conv-tanh" } else { "conv-relu" };
        let spec = CnnSpec { input: [2, 4, 4], channels: vec![3, 4], kernel: 3, classes, activation };
        (label, build_cnn(&spec, i).unwrap(), 32)
    };
    let noise = gaussian_like(network.params(), 0.3, &mut rng);
    let mut p = network.params().clone();
    p.axpy(1.0, &noise).unwrap();
    network.set_params(p).unwrap();
    let data = make_blobs(classes, dims, 3, 0.5, 2000 + i).unwrap();
    let temperature = rng.random_range(0.5..5.0);
    ZooInstance { label, network, data, temperature }
}

/// A report with the given per-flag scores, aligned with `mask`.
pub fn report_for(mask: &Mask, scores: &[f64]) -> ImportanceReport {
    let scores = mask
        .flags()
        .iter()
        .zip(scores)
        .map(|(f, &s)| GroupScore { layer: f.layer, group: f.group, score: s, signed_raw: s })
        .collect();
    ImportanceReport { measure: Measure::Random, scores, temperature: None, step: 0 }
}

/// Greedy re-ranking oracle: repeatedly prune the lowest-scoring eligible
/// group until `want` groups are pruned or nothing is eligible.
pub fn oracle_mask(prior: &Mask, scores: &[f64], want: usize, floor: usize) -> Vec<bool> {
    let flags = prior.flags();
    let mut kept: Vec<bool> = flags.iter().map(|f| f.kept).collect();
    let layers = flags.iter().map(|f| f.layer + 1).max().unwrap_or(0);
    let mut per_layer = vec![0usize; layers];
    for f in flags.iter().filter(|f| f.kept) {
        per_layer[f.layer] += 1;
    }
    let mut pruned = flags.iter().filter(|f| f.prunable && !f.kept).count();
    while pruned < want {
        let best = (0..flags.len())
            .filter(|&i| kept[i] && flags[i].prunable && per_layer[flags[i].layer] > floor)
            .min_by(|&a, &b| {
                scores[a]
                    .total_cmp(&scores[b])
                    .then(flags[a].layer.cmp(&flags[b].layer))
                    .then(flags[a].group.cmp(&flags[b].group))
            });
        match best {
            Some(i) => {
                kept[i] = false;
                per_layer[flags[i].layer] -= 1;
                pruned += 1;
            }
            None => break,
        }
    }
    kept
}
