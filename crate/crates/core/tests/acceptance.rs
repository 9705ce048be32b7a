//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test --release --test acceptance`. Measured values are
//! printed next to each verdict so they can be tracked as baselines.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use flowprune::analysis::{
    early_layer_ratio, ebt_correlation_trace, grasp_vs_loss_correlation, l2_vs_distance_trace, mean_defined,
};
use flowprune::cli::{cmd_train, compare_rows, ExperimentConfig};
use flowprune::flowlab::{
    check_loss_bound, convergence_study, integrate_flow, observed_orders, sgd_expectation_check, ExpectationProblem,
    FlowProblem, Integrator, DEFAULT_ENUMERATION_CAP,
};
use flowprune::importance::Measure;
use flowprune::masking::{build_mask, make_schedule, target_count, Mask};
use flowprune::netmodel::{Granularity, PruneGroup};
use flowprune::trainer::{prune_and_train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_gradient_oracle() -> Outcome {
    let mut worst = (0.0f64, "");
    for i in 0..100 {
        let z = zoo_instance(i);
        let graph = z.network.loss_graph(&z.data, z.temperature).map_err(|e| e.to_string())?;
        let g = graph.grad(z.network.params()).map_err(|e| e.to_string())?;
        let err = rel_err(&fd_grad(&graph, z.network.params()), &g);
        if err > worst.0 {
            worst = (err, z.label);
        }
    }
    check(worst.0 < 1e-6, format!("max relative error {:.3e} ({})", worst.0, worst.1))
}

fn c2_hvp_oracle() -> Outcome {
    let (mut worst_fd, mut worst_sym) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let z = zoo_instance(i);
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + i);
        let theta = z.network.params();
        let graph = z.network.loss_graph(&z.data, z.temperature).map_err(|e| e.to_string())?;
        let u = gaussian_like(theta, 1.0, &mut rng);
        let v = gaussian_like(theta, 1.0, &mut rng);
        let hv = graph.hvp(theta, &v).map_err(|e| e.to_string())?;
        let hu = graph.hvp(theta, &u).map_err(|e| e.to_string())?;
        worst_fd = worst_fd.max(rel_err(&fd_hvp(&graph, theta, &v, 1e-5), &hv));
        let (uhv, vhu) = (u.dot(&hv).unwrap(), v.dot(&hu).unwrap());
        worst_sym = worst_sym.max((uhv - vhu).abs() / uhv.abs().max(vhu.abs()).max(1e-300));
    }
    check(
        worst_fd < 1e-5 && worst_sym < 1e-9,
        format!("max FD relative error {worst_fd:.3e}, max symmetry gap {worst_sym:.3e}"),
    )
}

/// Observed orders of the first and second identities on the flowcheck MLP.
fn flow_orders() -> Result<(Vec<f64>, Vec<f64>), String> {
    let cfg = bundled("blobs_mlp_flowcheck.json");
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let net = cfg.network(seed).map_err(|e| e.to_string())?;
        let data = cfg.dataset(seed).map_err(|e| e.to_string())?;
        if net.parameter_count() > 500 || data.len() > 200 {
            return Err(format!("toy exceeds size limits: {} params, {} samples", net.parameter_count(), data.len()));
        }
        let problem = FlowProblem::from_network(&net, &data, 1.0).map_err(|e| e.to_string())?;
        let rows = convergence_study(&problem, &[1e-2, 5e-3, 2.5e-3], cfg.flow.horizon, Integrator::Rk4)
            .map_err(|e| e.to_string())?;
        first.extend(observed_orders(&rows.iter().map(|r| r.first).collect::<Vec<_>>()));
        second.extend(observed_orders(&rows.iter().map(|r| r.second).collect::<Vec<_>>()));
    }
    Ok((first, second))
}

fn fmt_orders(v: &[f64]) -> String {
    v.iter().map(|o| format!("{o:.3}")).collect::<Vec<_>>().join(" ")
}

fn c3_first_identity() -> Outcome {
    let (first, _) = flow_orders()?;
    check(first.iter().all(|&o| o >= 1.9), format!("observed orders {}", fmt_orders(&first)))
}

fn c4_second_identity() -> Outcome {
    let (_, second) = flow_orders()?;
    check(second.iter().all(|&o| o >= 1.8), format!("observed orders {}", fmt_orders(&second)))
}

fn c5_loss_bound() -> Outcome {
    let mlp = bundled("blobs_mlp_flowcheck.json");
    let cnn = bundled("toy_cnn_correlation.json");
    let mut worst = f64::INFINITY;
    let mut traces = 0;
    for (cfg, tag) in [(&mlp, "mlp"), (&cnn, "cnn")] {
        for seed in 0..5 {
            let net = cfg.network(seed).map_err(|e| e.to_string())?;
            let data = cfg.dataset(seed).map_err(|e| e.to_string())?;
            let problem = FlowProblem::from_network(&net, &data, 1.0).map_err(|e| e.to_string())?;
            let trace = integrate_flow(&problem, 1e-2, 50, Integrator::Rk4).map_err(|e| format!("{tag}: {e}"))?;
            worst = worst.min(check_loss_bound(&trace, net.params()).map_err(|e| e.to_string())?);
            traces += 1;
        }
    }
    check(worst >= -1e-9, format!("worst margin {worst:.3e} over {traces} traces"))
}

fn c6_sgd_expectation() -> Outcome {
    let cfg = bundled("blobs_mlp_flowcheck.json");
    let mut ratios = Vec::new();
    for &seed in &cfg.seeds {
        let net = cfg.network(seed).map_err(|e| e.to_string())?;
        if net.parameter_count() > 200 {
            return Err(format!("MLP has {} params", net.parameter_count()));
        }
        let problem =
            ExpectationProblem::from_network(&net, &cfg.dataset(seed).map_err(|e| e.to_string())?, 4)
                .map_err(|e| e.to_string())?;
        for order in [1u8, 2] {
            let r = |rate| sgd_expectation_check(&problem, rate, order, DEFAULT_ENUMERATION_CAP).map(|x| x.residual);
            let (big, small) = (r(1e-3).map_err(|e| e.to_string())?, r(5e-4).map_err(|e| e.to_string())?);
            ratios.push(big / small);
        }
    }
    check(
        ratios.iter().all(|r| (1.8..=2.2).contains(r)),
        format!("residual ratios {}", fmt_orders(&ratios)),
    )
}

/// History of a dense run plus the matching network and training split.
fn dense_history(cfg: &ExperimentConfig, seed: u64) -> Result<(flowprune::netmodel::Network, flowprune::trainer::RunLog, flowprune::netmodel::Dataset), String> {
    let data = cfg.dataset(seed).map_err(|e| e.to_string())?;
    let mut net = cfg.network(seed).map_err(|e| e.to_string())?;
    let tc = TrainConfig { rounds: 0, record_history: true, ..cfg.train_config(seed) };
    let (train, _) = data.split(1.0 - tc.eval_fraction, seed).map_err(|e| e.to_string())?;
    let init = net.clone();
    let log = prune_and_train(&mut net, &data, &tc).map_err(|e| e.to_string())?;
    Ok((init, log, train))
}

fn c7_grasp_loss_correlation() -> Outcome {
    let cfg = bundled("toy_cnn_correlation.json");
    let mut avg = [0.0; 3];
    for &seed in &cfg.seeds {
        let (mut net, log, train) = dense_history(&cfg, seed)?;
        let n = log.history.len();
        for (slot, k) in [0, n / 2, n - 1].into_iter().enumerate() {
            net.set_params(log.history[k].clone()).map_err(|e| e.to_string())?;
            let (c, _) = grasp_vs_loss_correlation(&net, &train, 1.0, Granularity::Structured, k as u64)
                .map_err(|e| e.to_string())?;
            avg[slot] += c.pearson.unwrap_or(f64::NAN) / cfg.seeds.len() as f64;
        }
    }
    let hits = avg.iter().filter(|&&r| r >= 0.7).count();
    check(hits >= 2, format!("mean r at init/mid/end {:.3} {:.3} {:.3}", avg[0], avg[1], avg[2]))
}

fn c8_l2_distance() -> Outcome {
    let cfg = bundled("mlp_distance.json");
    let (mut rs, mut overlaps) = (Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let (net, log, _) = dense_history(&cfg, seed)?;
        let trace = l2_vs_distance_trace(&net, &log.history, Granularity::Structured, cfg.analysis.overlap_target)
            .map_err(|e| e.to_string())?;
        rs.push(mean_defined(trace.iter().map(|d| d.correlation.pearson)).unwrap_or(f64::NAN));
        overlaps.push(trace.iter().map(|d| d.overlap).sum::<f64>() / trace.len() as f64);
    }
    check(
        rs.iter().all(|&r| r >= 0.9) && overlaps.iter().all(|&o| o >= 0.9),
        format!("epoch-averaged r {} overlap {}", fmt_orders(&rs), fmt_orders(&overlaps)),
    )
}

fn c9_ebt_trend() -> Outcome {
    let cfg = bundled("toy_cnn_ebt.json");
    let mut hits = 0;
    let mut detail = Vec::new();
    for &seed in &cfg.seeds {
        let (net, log, train) = dense_history(&cfg, seed)?;
        let trace =
            ebt_correlation_trace(&net, &log.history, &log.sigmas, &train, cfg.analysis.ebt_every, cfg.analysis.ebt_ratio)
                .map_err(|e| e.to_string())?;
        let (c, d) = (trace.correlation_trend(), trace.distance_trend());
        if c.is_some_and(|c| c > 0.0) && d.is_some_and(|d| d <= 0.0) {
            hits += 1;
        }
        detail.push(format!("seed {seed}: ρ {:.3} dist {:.3}", c.unwrap_or(f64::NAN), d.unwrap_or(f64::NAN)));
    }
    check(hits >= 2, format!("{hits}/3 seeds ({})", detail.join(", ")))
}

fn c10_measure_direction() -> Outcome {
    let mut cfg = bundled("blobs_mlp_compare.json");
    cfg.compare.rounds = vec![5];
    let rows = compare_rows(&cfg).map_err(|e| e.to_string())?;
    let (mut loss_hits, mut acc_hits) = (0, 0);
    for &seed in &cfg.seeds {
        let get = |m: &str| rows.iter().find(|r| r.method == m && r.seed == seed).unwrap();
        let (mag, lp, prop) = (get("magnitude"), get("loss"), get("proposed"));
        if mag.steps != lp.steps || prop.steps != lp.steps {
            return Err(format!("unequal step budgets for seed {seed}"));
        }
        loss_hits += (mag.final_train_loss <= lp.final_train_loss) as usize;
        acc_hits += (prop.final_eval_acc >= lp.final_eval_acc) as usize;
    }
    check(
        loss_hits >= 2 && acc_hits >= 2,
        format!("magnitude loss ≤ loss-pres on {loss_hits}/3, proposed acc ≥ loss-pres on {acc_hits}/3"),
    )
}

fn c11_grasp_early_layers() -> Outcome {
    let cfg = bundled("blobs_cnn_grasp.json");
    let mut hits = 0;
    let mut detail = Vec::new();
    for &seed in &cfg.seeds {
        let mut early = Vec::new();
        for m in [Measure::Grasp, Measure::GraspAbs] {
            let data = cfg.dataset(seed).map_err(|e| e.to_string())?;
            let mut net = cfg.network(seed).map_err(|e| e.to_string())?;
            let tc = TrainConfig { measure: m.into(), grasp_temperature: Some(1.0), rounds: 5, ..cfg.train_config(seed) };
            let log = prune_and_train(&mut net, &data, &tc).map_err(|e| e.to_string())?;
            early.push(early_layer_ratio(&log.final_mask));
        }
        hits += (early[0] > early[1]) as usize;
        detail.push(format!("{:.3} vs {:.3}", early[0], early[1]));
    }
    check(hits >= 2, format!("{hits}/3 seeds, early-half ratio GraSP vs |GraSP|: {}", detail.join(", ")))
}

fn random_layout(rng: &mut ChaCha8Rng) -> Vec<PruneGroup> {
    let layers = rng.random_range(1..=5);
    let mut groups = Vec::new();
    for layer in 0..layers {
        let prunable = layer + 1 < layers || rng.random_bool(0.5);
        for group in 0..rng.random_range(1..=12) {
            groups.push(PruneGroup { layer, group, indices: vec![groups.len()], prunable });
        }
    }
    groups
}

fn c12_masking_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut cases = 0;
    while cases < 200 {
        let groups = random_layout(&mut rng);
        let mut prior = Mask::keep_all(&groups, Granularity::Structured);
        if prior.prunable_groups() == 0 {
            continue;
        }
        cases += 1;
        let target = rng.random_range(0.05..0.95);
        let rounds = rng.random_range(1..=10);
        let floor = rng.random_range(0..=2);
        let schedule = make_schedule(target, rounds).map_err(|e| e.to_string())?;
        for (k, &t) in schedule.cumulative.iter().enumerate() {
            // Coarse scores force ties so the tie-break is exercised.
            let scores: Vec<f64> = (0..groups.len()).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
            let expect = oracle_mask(&prior, &scores, target_count(t, prior.prunable_groups()), floor);
            let out = build_mask(&report_for(&prior, &scores), t, &prior, floor).map_err(|e| e.to_string())?;
            let got: Vec<bool> = out.mask.flags().iter().map(|f| f.kept).collect();
            if got != expect {
                return Err(format!("case {cases} round {k}: mask differs from the re-ranking oracle"));
            }
            let count = target_count(t, prior.prunable_groups());
            if out.mask.pruned_groups() + out.shortfall != count {
                return Err(format!("case {cases} round {k}: pruned {} + shortfall {} != {count}", out.mask.pruned_groups(), out.shortfall));
            }
            if out.shortfall == 0 && out.mask.pruned_groups() != count {
                return Err(format!("case {cases} round {k}: count mismatch"));
            }
            let capacity: usize = (0..prior.layers())
                .map(|l| {
                    let in_layer = groups.iter().filter(|g| g.layer == l).count();
                    let prunable = groups.iter().filter(|g| g.layer == l && g.prunable).count();
                    prunable.min(in_layer.saturating_sub(floor))
                })
                .sum();
            if out.mask.pruned_groups() != count.min(capacity) {
                return Err(format!("case {cases} round {k}: pruned {} but schedule allows {}", out.mask.pruned_groups(), count.min(capacity)));
            }
            if prior.pruned_set().iter().any(|i| out.mask.is_kept(*i)) {
                return Err(format!("case {cases} round {k}: a pruned group came back"));
            }
            prior = out.mask;
        }
    }
    check(true, format!("{cases} cases agree with the oracle"))
}

fn c13_determinism() -> Outcome {
    let mut cfg = bundled("blobs_mlp_compare.json");
    cfg.seeds = vec![0];
    cfg.train.rounds = 5;
    cfg.train.measure = Measure::Proposed.into();
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let mut outs = Vec::new();
    for d in &dirs {
        let run = cmd_train(&cfg, d.path()).map_err(|e| e.to_string())?;
        let read = |name: &str| std::fs::read(run.dir.join("seed-0").join(name)).map_err(|e| e.to_string());
        outs.push((read("runlog.csv")?, read("model.ckpt")?));
    }
    check(
        outs[0] == outs[1],
        format!("runlog {} bytes, checkpoint {} bytes", outs[0].0.len(), outs[0].1.len()),
    )
}

fn main() -> ExitCode {
    let min = |m: u64| Duration::from_secs(60 * m);
    let criteria = [
        Criterion { id: 1, name: "gradient oracle", budget: Duration::from_secs(30), run: c1_gradient_oracle },
        Criterion { id: 2, name: "HVP oracle", budget: Duration::from_secs(30), run: c2_hvp_oracle },
        Criterion { id: 3, name: "first-derivative identity order", budget: min(2), run: c3_first_identity },
        Criterion { id: 4, name: "second-derivative identity order", budget: min(2), run: c4_second_identity },
        Criterion { id: 5, name: "loss bound along flow", budget: min(2), run: c5_loss_bound },
        Criterion { id: 6, name: "SGD expectation residuals", budget: min(1), run: c6_sgd_expectation },
        Criterion { id: 7, name: "GraSP vs loss-pres correlation", budget: min(5), run: c7_grasp_loss_correlation },
        Criterion { id: 8, name: "ℓ2 vs distance from init", budget: min(5), run: c8_l2_distance },
        Criterion { id: 9, name: "|σΔσ| correlation trend", budget: min(10), run: c9_ebt_trend },
        Criterion { id: 10, name: "magnitude/proposed vs loss-pres", budget: min(10), run: c10_measure_direction },
        Criterion { id: 11, name: "GraSP T=1 prunes early layers", budget: min(10), run: c11_grasp_early_layers },
        Criterion { id: 12, name: "masking exactness", budget: min(1), run: c12_masking_exactness },
        Criterion { id: 13, name: "training determinism", budget: min(5), run: c13_determinism },
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.contains(&c.id)) {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = t.elapsed();
        let (verdict, detail) = match (&outcome, elapsed <= c.budget) {
            (Ok(d), true) => ("PASS", d.clone()),
            (Ok(d), false) => ("FAIL", format!("{d}; over the {:?} budget", c.budget)),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!("criterion {:>2} {verdict} {:<34} {detail} [{:.1}s]", c.id, c.name, elapsed.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
