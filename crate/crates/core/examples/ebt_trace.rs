//! The |σΔσ| proxy against loss preservation over a dense training run.
//!
//! Trains the toy CNN from `toy_cnn_ebt.json` without pruning, then, for
//! every epoch, correlates `|σ|·|σ − σ_prev|` with `|θᵀg|` per filter and
//! measures how far the bottom-20% σ mask moved since the previous epoch.
//! As training settles the correlation rises and the mask stops moving.
//!
//! ```bash
//! cargo run --release --example ebt_trace
//! ```

use std::path::Path;

use flowprune::analysis::ebt_correlation_trace;
use flowprune::cli::load_config;
use flowprune::trainer::{prune_and_train, TrainConfig};
use flowprune::Result;

fn main() -> Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toy_cnn_ebt.json");
    let cfg = load_config(&path, Some(0), &[])?;
    let data = cfg.dataset(0)?;
    let mut net = cfg.network(0)?;
    let init = net.clone();
    let tc = TrainConfig { rounds: 0, record_history: true, ..cfg.train_config(0) };
    let log = prune_and_train(&mut net, &data, &tc)?;
    let (train, _) = data.split(1.0 - tc.eval_fraction, 0)?;

    let trace = ebt_correlation_trace(&init, &log.history, &log.sigmas, &train, 5, cfg.analysis.ebt_ratio)?;
    for p in &trace.points {
        println!(
            "epoch {:>2}  pearson {:>7.3}  mask distance {}",
            p.epoch,
            p.correlation.pearson.unwrap_or(f64::NAN),
            p.mask_distance
        );
    }
    println!(
        "trends: correlation {:.3}, mask distance {:.3}",
        trace.correlation_trend().unwrap_or(f64::NAN),
        trace.distance_trend().unwrap_or(f64::NAN)
    );
    Ok(())
}
