//! Round schedules, global-ranking masks and layer floors.
//!
//! A 50% target split over 4 rounds prunes the lowest-scoring groups across
//! all layers. The first layer has the lowest scores, so it would empty
//! out, but the floor keeps one filter alive there and the ranking spills
//! over into the next layer.
//!
//! ```bash
//! cargo run --release --example mask_schedule
//! ```

use flowprune::importance::magnitude;
use flowprune::masking::{build_mask, layerwise_ratios, make_schedule, Mask, DEFAULT_FLOOR};
use flowprune::netmodel::{build_mlp, Activation, Granularity};
use flowprune::Result;

fn main() -> Result<()> {
    let mut net = build_mlp(&[4, 6, 8, 3], Activation::Tanh, 1)?;
    // Shrink the first layer so magnitude ranks all of it lowest.
    let mut p = net.params().clone();
    for x in p.tensors_mut()[0].data_mut() {
        *x *= 1e-3;
    }
    net.set_params(p)?;

    let schedule = make_schedule(0.5, 4)?;
    let mut mask = Mask::for_network(&net, Granularity::Structured);
    for (round, &target) in schedule.cumulative.iter().enumerate() {
        let report = magnitude(&net, Granularity::Structured)?;
        let out = build_mask(&report, target, &mask, DEFAULT_FLOOR)?;
        let ratios: Vec<String> = layerwise_ratios(&out.mask).iter().map(|r| format!("{}/{}", r.pruned, r.groups)).collect();
        println!(
            "round {round}: target {target:.3}  pruned {:>2}/{}  per layer [{}]  floored {:?}",
            out.mask.pruned_groups(),
            out.mask.prunable_groups(),
            ratios.join(" "),
            out.floored_layers
        );
        mask = out.mask;
    }

    let mut bytes = Vec::new();
    mask.write_bitset(&mut bytes)?;
    let back = Mask::read_bitset(bytes.as_slice())?;
    println!("bitset {} bytes, round-trip equal: {}", bytes.len(), back == mask);
    Ok(())
}
