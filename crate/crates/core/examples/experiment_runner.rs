//! The config-driven runner behind the `flowprune` binary.
//!
//! Loads a bundled config, applies dotted-path overrides, trains into a
//! hash-named run directory and then analyzes the recorded checkpoints.
//! Running it again with the same config reuses the same directory and
//! appends another line to `manifest.jsonl`.
//!
//! ```bash
//! cargo run --release --example experiment_runner
//! ```
//!
//! The same steps from the command line:
//!
//! ```bash
//! flowprune train --config crates/core/configs/toy_cnn_correlation.json --set seeds=[0]
//! flowprune analyze runs/train-<hash> --experiment grasp-vs-loss
//! ```

use std::path::Path;

use flowprune::cli::{cmd_analyze, cmd_train, load_config, Experiment};
use flowprune::Result;

fn main() -> Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toy_cnn_correlation.json");
    let overrides = ["seeds=[0]".to_string(), "train.lr_schedule.0.epochs=6".to_string()];
    let cfg = load_config(&path, None, &overrides)?;
    println!("config hash {}", cfg.hash());

    let out = std::env::temp_dir().join("flowprune-example-runs");
    let train = cmd_train(&cfg, &out)?;
    println!("train   -> {}", train.dir.display());
    for (name, digest) in &train.manifest.artifacts {
        println!("  {name:<32} {}", &digest[..16]);
    }

    let analysis = cmd_analyze(&train.dir, Experiment::All)?;
    println!("analyze -> {} ({} artifacts)", analysis.dir.display(), analysis.manifest.artifacts.len());
    Ok(())
}
