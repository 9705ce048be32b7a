//! Magnitude, loss preservation and the magnitude-weighted extension at an
//! equal step budget.
//!
//! Runs the `blobs_mlp_compare.json` grid (3 measures × {1, 5} rounds × 3
//! seeds) and prints one row per run, then the per-measure means.
//!
//! ```bash
//! cargo run --release --example compare_measures
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use flowprune::cli::{compare_rows, load_config};
use flowprune::Result;

fn main() -> Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/blobs_mlp_compare.json");
    let cfg = load_config(&path, None, &[])?;
    let rows = compare_rows(&cfg)?;

    let mut means: BTreeMap<(String, usize), (f64, f64, usize)> = BTreeMap::new();
    for r in &rows {
        println!(
            "{:<10} rounds {} seed {}  train loss {:.4}  eval acc {:.3}  pruned {:.2}  steps {}",
            r.method, r.rounds, r.seed, r.final_train_loss, r.final_eval_acc, r.group_fraction, r.steps
        );
        let m = means.entry((r.method.clone(), r.rounds)).or_default();
        m.0 += r.final_train_loss;
        m.1 += r.final_eval_acc;
        m.2 += 1;
    }
    println!();
    for ((method, rounds), (loss, acc, n)) in means {
        println!("{method:<10} rounds {rounds}  mean train loss {:.4}  mean eval acc {:.3}", loss / n as f64, acc / n as f64);
    }
    Ok(())
}
