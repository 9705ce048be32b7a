//! Every importance measure on one network, ranked the same way.
//!
//! Trains a small MLP for a few epochs, then scores its hidden filters with
//! magnitude, loss preservation, the magnitude-weighted extension, GraSP,
//! |GraSP|, |σΔσ| and random scores. Lower scores are pruned first, so the
//! first groups listed are the ones each measure would remove.
//!
//! ```bash
//! cargo run --release --example importance_scores
//! ```

use flowprune::importance::{self, Measure, ScoreInputs};
use flowprune::netmodel::{build_mlp, make_blobs, Activation, Granularity};
use flowprune::trainer::{full_batch_gradient, prune_and_train, RatePhase, TrainConfig};
use flowprune::Result;

fn main() -> Result<()> {
    let data = make_blobs(4, 8, 40, 0.3, 0)?;
    let mut net = build_mlp(&[8, 12, 12, 4], Activation::Tanh, 0)?;
    let config = TrainConfig {
        lr_schedule: vec![RatePhase { rate: 0.05, epochs: 5 }],
        rounds: 0,
        ..TrainConfig::default()
    };
    let log = prune_and_train(&mut net, &data, &config)?;
    let prev_sigma = &log.sigmas[log.sigmas.len() - 2];

    let gradient = full_batch_gradient(&net, &data, 1.0)?;
    let scoring = data.class_balanced(importance::SCORING_PER_CLASS, 0)?;
    let (_, hg) = importance::hessian_gradient(&net, &scoring, 1.0)?;
    let inputs = ScoreInputs {
        gradient: Some(&gradient),
        hessian_gradient: Some(&hg),
        prev_sigma: Some(prev_sigma),
        seed: 0,
        temperature: Some(1.0),
    };

    for measure in Measure::ALL {
        let report = importance::score(measure, &net, Granularity::Structured, &inputs)?;
        let first: Vec<String> = report
            .ranking()
            .into_iter()
            .filter(|&i| report.scores[i].layer < 2)
            .take(4)
            .map(|i| {
                let s = &report.scores[i];
                format!("L{}/{} ({:.2e})", s.layer, s.group, s.signed_raw)
            })
            .collect();
        println!("{:<10} prune first: {}", measure.name(), first.join("  "));
    }
    Ok(())
}
