//! Oracle checks for gradients, HVPs, initialization, scores and masks.

mod common;

use common::{fd_grad, fd_hvp, gaussian_like, oracle_mask, rel_err, report_for, zoo_instance};
use flowprune::analysis::{pearson, spearman};
use flowprune::diffcore::{GradientVector, GraphBuilder, Tensor};
use flowprune::importance::{magnitude, random_importance};
use flowprune::masking::{apply_mask, build_mask, target_count, Mask};
use flowprune::netmodel::{build_cnn, build_mlp, Activation, CnnSpec, Granularity, Network, ParamRole};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn gradient_matches_finite_differences_for_each_layer_kind() {
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..8 {
        let z = zoo_instance(i);
        let graph = z.network.loss_graph(&z.data, z.temperature).unwrap();
        let ad = graph.grad(z.network.params()).unwrap();
        let fd = fd_grad(&graph, z.network.params());
        let err = rel_err(&ad, &fd);
        assert!(err < 1e-6, "{}: relative error {err:e}", z.label);
        seen.insert(z.label);
    }
    assert_eq!(seen.len(), 4);
}

#[test]
fn hvp_is_linear_symmetric_and_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..4 {
        let z = zoo_instance(i);
        let graph = z.network.loss_graph(&z.data, z.temperature).unwrap();
        let p = z.network.params();
        let u = gaussian_like(p, 1.0, &mut rng);
        let v = gaussian_like(p, 1.0, &mut rng);
        let hu = graph.hvp(p, &u).unwrap();
        let hv = graph.hvp(p, &v).unwrap();

        let mut w = u.scaled(2.0);
        w.axpy(-3.0, &v).unwrap();
        let mut combo = hu.scaled(2.0);
        combo.axpy(-3.0, &hv).unwrap();
        assert!(rel_err(&combo, &graph.hvp(p, &w).unwrap()) < 1e-10, "{}: linearity", z.label);

        let (a, b) = (u.dot(&hv).unwrap(), v.dot(&hu).unwrap());
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{}: uᵀHv {a} vs vᵀHu {b}", z.label);

        assert!(rel_err(&hv, &fd_hvp(&graph, p, &v, 1e-5)) < 1e-5, "{}: finite differences", z.label);
    }
}

#[test]
fn hvp_of_a_quadratic_is_the_matrix_product() {
    // L(x) = ½ xᵀ A x with A symmetric, so ∇L = Ax and H v = Av.
    let a = [[2.0, 0.5, -1.0], [0.5, 3.0, 0.25], [-1.0, 0.25, 1.5]];
    let mut g = GraphBuilder::new(vec![vec![3, 1]]);
    let x = g.param(0).unwrap();
    let am = g.constant(Tensor::new(vec![3, 3], a.iter().flatten().copied().collect()).unwrap());
    let ax = g.matmul(am, x).unwrap();
    let xax = g.mul(x, ax).unwrap();
    let s = g.sum(xax);
    let out = g.scale(s, 0.5);
    let graph = g.finish(out);

    let x0 = GradientVector::new(vec![Tensor::new(vec![3, 1], vec![0.3, -1.2, 0.7]).unwrap()]);
    let v = GradientVector::new(vec![Tensor::new(vec![3, 1], vec![1.0, 2.0, -0.5]).unwrap()]);
    let hv = graph.hvp(&x0, &v).unwrap().flatten();
    let grad = graph.grad(&x0).unwrap().flatten();
    for r in 0..3 {
        let want_hv: f64 = (0..3).map(|c| a[r][c] * v.flatten()[c]).sum();
        let want_g: f64 = (0..3).map(|c| a[r][c] * x0.flatten()[c]).sum();
        assert!((hv[r] - want_hv).abs() < 1e-12);
        assert!((grad[r] - want_g).abs() < 1e-12);
    }
}

#[test]
fn initialization_moments() {
    let net = build_mlp(&[100, 100, 10], Activation::Relu, 3).unwrap();
    let w = &net.params().tensors()[Network::param_index(0, ParamRole::Weight)];
    let n = w.len() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let var = w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let want = 2.0 / 100.0;
    assert!(mean.abs() < 4.0 * (want / n).sqrt(), "mean {mean}");
    assert!((var / want - 1.0).abs() < 0.2, "variance {var} vs {want}");
    assert!(net.params().tensors()[Network::param_index(0, ParamRole::Bias)].data().iter().all(|&b| b == 0.0));
    assert!(net.sigma(0).iter().all(|&s| s == 1.0));
}

#[test]
fn cnn_on_zero_input_sees_only_biases() {
    // With x = 0 every conv output is act(b); the head then sees a constant
    // feature per channel, so the logits are act(b)ᵀ W_head + b_head.
    let spec = CnnSpec { input: [1, 4, 4], channels: vec![3], kernel: 3, classes: 2, activation: Activation::Tanh };
    let mut net = build_cnn(&spec, 5).unwrap();
    let mut p = net.params().clone();
    let bias = [0.3, -0.7, 1.1];
    p.tensors_mut()[Network::param_index(0, ParamRole::Bias)].data_mut().copy_from_slice(&bias);
    p.tensors_mut()[Network::param_index(1, ParamRole::Bias)].data_mut().copy_from_slice(&[0.05, -0.02]);
    net.set_params(p).unwrap();

    let logits = net.logits(&Tensor::zeros(&[1, 16])).unwrap();
    let head_w = &net.params().tensors()[Network::param_index(1, ParamRole::Weight)];
    let features = head_w.shape()[0];
    let per_channel = features / 3;
    for k in 0..2 {
        let mut want = [0.05, -0.02][k];
        for f in 0..features {
            want += head_w.data()[f * 2 + k] * bias[f / per_channel].tanh();
        }
        assert!((logits.data()[k] - want).abs() < 1e-12, "logit {k}: {} vs {want}", logits.data()[k]);
    }
}

#[test]
fn apply_mask_zeroes_exactly_the_pruned_groups() {
    let mut net = build_mlp(&[4, 6, 5, 3], Activation::Tanh, 1).unwrap();
    let groups = net.groups(Granularity::Structured);
    let mut mask = Mask::keep_all(&groups, Granularity::Structured);
    mask.prune(1);
    mask.prune(8);
    let before = net.params().flatten();
    apply_mask(&mut net, &mask).unwrap();
    let after = net.params().flatten();
    let mut zeroed = vec![false; before.len()];
    for i in [1, 8] {
        for &j in &groups[i].indices {
            zeroed[j] = true;
        }
    }
    for j in 0..before.len() {
        let want = if zeroed[j] { 0.0 } else { before[j] };
        assert_eq!(after[j], want, "parameter {j}");
    }
}

#[test]
fn random_scores_look_uniform() {
    // Kolmogorov-Smirnov against U(0,1); the 0.1% critical value is 1.95/√n.
    let net = build_mlp(&[8, 400, 400, 2], Activation::Relu, 0).unwrap();
    let mut s = random_importance(&net, Granularity::Unstructured, 11).values();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let d = s.iter().enumerate().map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs())).fold(0.0, f64::max);
    assert!(d < 1.95 / n.sqrt(), "KS statistic {d} over {n} scores");
}

fn small_mask() -> Mask {
    let net = build_mlp(&[3, 5, 4, 6, 2], Activation::Tanh, 0).unwrap();
    Mask::for_network(&net, Granularity::Structured)
}

proptest! {
    #[test]
    fn masking_matches_greedy_oracle(scores in proptest::collection::vec(-10.0f64..10.0, 17), t in 0.0f64..1.0, floor in 0usize..3) {
        let prior = small_mask();
        let out = build_mask(&report_for(&prior, &scores), t, &prior, floor).unwrap();
        let want = target_count(t, prior.prunable_groups());
        let kept: Vec<bool> = out.mask.flags().iter().map(|f| f.kept).collect();
        prop_assert_eq!(kept, oracle_mask(&prior, &scores, want, floor));
        prop_assert_eq!(out.mask.pruned_groups() + out.shortfall, want);
    }

    #[test]
    fn masks_grow_monotonically(scores in proptest::collection::vec(-10.0f64..10.0, 17), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let prior = small_mask();
        let report = report_for(&prior, &scores);
        let first = build_mask(&report, lo, &prior, 1).unwrap().mask;
        let second = build_mask(&report, hi, &first, 1).unwrap().mask;
        for (x, y) in first.flags().iter().zip(second.flags()) {
            prop_assert!(x.kept || !y.kept);
        }
    }

    #[test]
    fn masks_ignore_positive_rescaling(seed in 0u64..1000, c in 1e-3f64..1e3, t in 0.0f64..1.0) {
        let net = build_mlp(&[3, 5, 4, 6, 2], Activation::Tanh, seed).unwrap();
        let report = magnitude(&net, Granularity::Structured).unwrap();
        let prior = Mask::for_network(&net, Granularity::Structured);
        let a = build_mask(&report, t, &prior, 1).unwrap().mask;
        let b = build_mask(&report.rescaled(c), t, &prior, 1).unwrap().mask;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pearson_is_affine_invariant(
        x in proptest::collection::vec(-5.0f64..5.0, 3..40),
        slope in 0.1f64..10.0,
        shift in -10.0f64..10.0,
    ) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v.sin() + i as f64 * 0.1).collect();
        let x2: Vec<f64> = x.iter().map(|v| slope * v + shift).collect();
        if let (Some(r1), Some(r2)) = (pearson(&x, &y).unwrap(), pearson(&x2, &y).unwrap()) {
            prop_assert!((r1 - r2).abs() < 1e-9);
        }
    }

    #[test]
    fn spearman_is_monotone_invariant(x in proptest::collection::vec(-3.0f64..3.0, 3..40)) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v.cos() - i as f64).collect();
        let x2: Vec<f64> = x.iter().map(|v| v.exp() + v.powi(3)).collect();
        prop_assert_eq!(spearman(&x, &y).unwrap(), spearman(&x2, &y).unwrap());
    }
}
