//! GraSP without temperature against gradient-norm preservation, per layer.
//!
//! Runs the bundled `blobs_cnn_grasp.json` setup: five prune-and-train
//! rounds to 50% of the conv filters, once with signed GraSP at T=1 and once
//! with |GraSP|. Once the network has trained a little, signed GraSP removes
//! the filters whose loss it would raise most, and those sit in the first
//! conv layer.
//!
//! ```bash
//! cargo run --release --example grasp_layerwise
//! ```

use std::path::Path;

use flowprune::analysis::early_layer_ratio;
use flowprune::cli::load_config;
use flowprune::importance::Measure;
use flowprune::masking::layerwise_ratios;
use flowprune::trainer::{prune_and_train, TrainConfig};
use flowprune::Result;

fn main() -> Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/blobs_cnn_grasp.json");
    let cfg = load_config(&path, None, &[])?;
    for &seed in &cfg.seeds {
        for measure in [Measure::Grasp, Measure::GraspAbs] {
            let data = cfg.dataset(seed)?;
            let mut net = cfg.network(seed)?;
            let tc = TrainConfig { measure: measure.into(), grasp_temperature: Some(1.0), ..cfg.train_config(seed) };
            let log = prune_and_train(&mut net, &data, &tc)?;
            let per_layer: Vec<String> =
                layerwise_ratios(&log.final_mask).iter().map(|r| format!("{:.2}", r.fraction)).collect();
            println!(
                "seed {seed} {:<9} layer ratios [{}]  early half {:.3}  eval acc {:.3}",
                measure.name(),
                per_layer.join(" "),
                early_layer_ratio(&log.final_mask),
                log.final_eval_acc()
            );
        }
    }
    Ok(())
}
