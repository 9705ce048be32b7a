//! Filter norm versus distance from initialization.
//!
//! With a zero-centered, small-variance initialization, `‖θ_p(t)‖²` and
//! `‖θ_p(t) − θ_p(0)‖²` rank filters almost the same way, so
//! magnitude pruning approximately removes the filters that moved least.
//! This prints the per-epoch Pearson r and the overlap of the two 50% prune
//! sets for the `mlp_distance.json` run.
//!
//! ```bash
//! cargo run --release --example l2_vs_distance
//! ```

use std::path::Path;

use flowprune::analysis::l2_vs_distance_trace;
use flowprune::cli::load_config;
use flowprune::netmodel::Granularity;
use flowprune::trainer::{prune_and_train, TrainConfig};
use flowprune::Result;

fn main() -> Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/mlp_distance.json");
    let cfg = load_config(&path, Some(0), &[])?;
    let data = cfg.dataset(0)?;
    let mut net = cfg.network(0)?;
    let init = net.clone();
    let tc = TrainConfig { rounds: 0, record_history: true, ..cfg.train_config(0) };
    prune_and_train(&mut net, &data, &tc).map(|log| {
        let trace = l2_vs_distance_trace(&init, &log.history, Granularity::Structured, cfg.analysis.overlap_target)?;
        for (k, d) in trace.iter().enumerate().filter(|(k, _)| k % 10 == 0) {
            println!(
                "epoch {:>3}  pearson {:.4}  spearman {:.4}  overlap {:.3}",
                k + 1,
                d.correlation.pearson.unwrap_or(f64::NAN),
                d.correlation.spearman.unwrap_or(f64::NAN),
                d.overlap
            );
        }
        Ok(())
    })?
}
