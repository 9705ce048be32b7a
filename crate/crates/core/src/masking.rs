//! Pruning masks, round schedules and mask diagnostics.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::importance::ImportanceReport;
use crate::netmodel::{Granularity, Network, PruneGroup};

/// Default number of filters every prunable layer keeps.
pub const DEFAULT_FLOOR: usize = 1;

/// Evenly divided cumulative pruning targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub target: f64,
    pub rounds: usize,
    pub cumulative: Vec<f64>,
}

pub fn make_schedule(target: f64, rounds: usize) -> Result<Schedule> {
    if !(target > 0.0 && target < 1.0) {
        return Err(invalid(format!("target fraction {target} outside (0,1)")));
    }
    if rounds == 0 {
        return Err(invalid("at least one pruning round is required"));
    }
    let cumulative = (1..=rounds).map(|k| target * k as f64 / rounds as f64).collect();
    Ok(Schedule { target, rounds, cumulative })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupFlag {
    pub layer: usize,
    pub group: usize,
    pub size: usize,
    pub prunable: bool,
    pub kept: bool,
}

/// Keep/prune state per group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    granularity: Granularity,
    flags: Vec<GroupFlag>,
}

impl Mask {
    /// Everything kept.
    pub fn keep_all(groups: &[PruneGroup], granularity: Granularity) -> Self {
        let flags = groups
            .iter()
            .map(|g| GroupFlag { layer: g.layer, group: g.group, size: g.indices.len(), prunable: g.prunable, kept: true })
            .collect();
        Self { granularity, flags }
    }

    pub fn for_network(network: &Network, granularity: Granularity) -> Self {
        Self::keep_all(&network.groups(granularity), granularity)
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn flags(&self) -> &[GroupFlag] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.flags[i].kept
    }

    /// Mark group `i` pruned.
    pub fn prune(&mut self, i: usize) {
        self.flags[i].kept = false;
    }

    fn same_layout(&self, other: &Mask) -> bool {
        self.granularity == other.granularity
            && self.flags.len() == other.flags.len()
            && self.flags.iter().zip(&other.flags).all(|(a, b)| a.layer == b.layer && a.group == b.group && a.size == b.size)
    }

    pub fn prunable_groups(&self) -> usize {
        self.flags.iter().filter(|f| f.prunable).count()
    }

    pub fn pruned_groups(&self) -> usize {
        self.flags.iter().filter(|f| !f.kept).count()
    }

    /// Pruned share of prunable groups.
    pub fn group_fraction(&self) -> f64 {
        let total = self.prunable_groups();
        if total == 0 {
            0.0
        } else {
            self.pruned_groups() as f64 / total as f64
        }
    }

    pub fn pruned_params(&self) -> usize {
        self.flags.iter().filter(|f| !f.kept).map(|f| f.size).sum()
    }

    /// Pruned share of all parameters covered by prunable groups.
    pub fn param_fraction(&self) -> f64 {
        let total: usize = self.flags.iter().filter(|f| f.prunable).map(|f| f.size).sum();
        if total == 0 {
            0.0
        } else {
            self.pruned_params() as f64 / total as f64
        }
    }

    pub fn pruned_set(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&i| !self.flags[i].kept).collect()
    }

    /// Per-parameter keep flags for `network`.
    pub fn param_keep(&self, network: &Network) -> Result<Vec<bool>> {
        let groups = network.groups(self.granularity);
        self.check_groups(&groups)?;
        let mut keep = vec![true; network.parameter_count()];
        for (g, f) in groups.iter().zip(&self.flags) {
            if !f.kept {
                for &i in &g.indices {
                    keep[i] = false;
                }
            }
        }
        Ok(keep)
    }

    fn check_groups(&self, groups: &[PruneGroup]) -> Result<()> {
        let ok = groups.len() == self.flags.len()
            && groups
                .iter()
                .zip(&self.flags)
                .all(|(g, f)| g.layer == f.layer && g.group == f.group && g.indices.len() == f.size);
        if ok {
            Ok(())
        } else {
            Err(shape_err("mask does not match network groups"))
        }
    }

    pub fn layers(&self) -> usize {
        self.flags.iter().map(|f| f.layer + 1).max().unwrap_or(0)
    }

    /// CSV with columns `layer,group,kept`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["layer", "group", "kept"])?;
        for f in &self.flags {
            wr.write_record([f.layer.to_string(), f.group.to_string(), u8::from(f.kept).to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Compact form: little-endian `u64` header length, JSON header, then one
    /// bit per group (LSB first, 1 = kept).
    pub fn write_bitset<W: Write>(&self, mut w: W) -> Result<()> {
        let mut layers: Vec<BitsetLayer> = Vec::new();
        for f in &self.flags {
            match layers.last_mut() {
                Some(l) if l.layer == f.layer => l.groups += 1,
                _ => layers.push(BitsetLayer { layer: f.layer, groups: 1, group_size: f.size, prunable: f.prunable }),
            }
        }
        let header = BitsetHeader { format: "flowprune-mask".into(), version: 1, granularity: self.granularity, layers };
        let json = serde_json::to_vec(&header)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut bytes = vec![0u8; self.flags.len().div_ceil(8)];
        for (i, f) in self.flags.iter().enumerate() {
            if f.kept {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_bitset<R: Read>(mut r: R) -> Result<Self> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: BitsetHeader = serde_json::from_slice(&json)?;
        if header.format != "flowprune-mask" {
            return Err(Error::Format(format!("unexpected format `{}`", header.format)));
        }
        let mut flags = Vec::new();
        for l in &header.layers {
            for g in 0..l.groups {
                flags.push(GroupFlag { layer: l.layer, group: g, size: l.group_size, prunable: l.prunable, kept: true });
            }
        }
        let mut bytes = vec![0u8; flags.len().div_ceil(8)];
        r.read_exact(&mut bytes)?;
        for (i, f) in flags.iter_mut().enumerate() {
            f.kept = bytes[i / 8] & (1 << (i % 8)) != 0;
        }
        Ok(Self { granularity: header.granularity, flags })
    }
}

#[derive(Serialize, Deserialize)]
struct BitsetHeader {
    format: String,
    version: u32,
    granularity: Granularity,
    layers: Vec<BitsetLayer>,
}

#[derive(Serialize, Deserialize)]
struct BitsetLayer {
    layer: usize,
    groups: usize,
    group_size: usize,
    prunable: bool,
}

/// A mask plus whether layer floors stopped it short of its target.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskOutcome {
    pub mask: Mask,
    /// Groups the target asked for that floors prevented.
    pub shortfall: usize,
    /// Layers whose floor was hit while ranking spilled past them.
    pub floored_layers: Vec<usize>,
}

/// Number of prunable groups a cumulative target corresponds to.
pub fn target_count(target: f64, prunable: usize) -> usize {
    (target * prunable as f64).round() as usize
}

/// Extend `prior` by globally ranking its unpruned prunable groups by score.
///
/// Groups are pruned lowest score first (ties by layer, then group index)
/// until `round(target · prunable groups)` are pruned, never leaving a layer
/// with fewer than `floor` kept groups.
pub fn build_mask(report: &ImportanceReport, target: f64, prior: &Mask, floor: usize) -> Result<MaskOutcome> {
    if report.scores.len() != prior.flags.len()
        || report.scores.iter().zip(&prior.flags).any(|(s, f)| s.layer != f.layer || s.group != f.group)
    {
        return Err(shape_err("importance report does not match the mask's groups"));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(invalid(format!("target {target} outside [0,1]")));
    }
    let total = prior.prunable_groups();
    let want = target_count(target, total);
    if want < prior.pruned_groups() {
        return Err(invalid(format!(
            "target {target} asks for {want} pruned groups but {} are already pruned",
            prior.pruned_groups()
        )));
    }
    let mut need = want - prior.pruned_groups();

    let layers = prior.layers();
    let mut kept = vec![0usize; layers];
    for f in prior.flags.iter().filter(|f| f.kept) {
        kept[f.layer] += 1;
    }

    let mut mask = prior.clone();
    let mut floored = Vec::new();
    for i in report.ranking() {
        if need == 0 {
            break;
        }
        let f = prior.flags[i];
        if !f.prunable || !f.kept {
            continue;
        }
        if kept[f.layer] <= floor {
            if !floored.contains(&f.layer) {
                floored.push(f.layer);
            }
            continue;
        }
        mask.prune(i);
        kept[f.layer] -= 1;
        need -= 1;
    }
    floored.sort_unstable();
    Ok(MaskOutcome { mask, shortfall: need, floored_layers: floored })
}

/// Zero every pruned parameter.
pub fn apply_mask(network: &mut Network, mask: &Mask) -> Result<()> {
    let keep = mask.param_keep(network)?;
    let mut p = network.params().clone();
    let mut i = 0;
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            if !keep[i] {
                *x = 0.0;
            }
            i += 1;
        }
    }
    network.set_params(p)
}

/// Hamming distance between group flags.
pub fn mask_distance(a: &Mask, b: &Mask) -> Result<usize> {
    if !a.same_layout(b) {
        return Err(shape_err("masks have different layouts"));
    }
    Ok(a.flags.iter().zip(&b.flags).filter(|(x, y)| x.kept != y.kept).count())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRatio {
    pub layer: usize,
    pub groups: usize,
    pub pruned: usize,
    pub fraction: f64,
}

/// Pruned over prunable groups, for every layer that has prunable groups.
pub fn layerwise_ratios(mask: &Mask) -> Vec<LayerRatio> {
    let mut out: Vec<LayerRatio> =
        (0..mask.layers()).map(|l| LayerRatio { layer: l, groups: 0, pruned: 0, fraction: 0.0 }).collect();
    for f in mask.flags.iter().filter(|f| f.prunable) {
        out[f.layer].groups += 1;
        if !f.kept {
            out[f.layer].pruned += 1;
        }
    }
    out.retain(|r| r.groups > 0);
    for r in &mut out {
        r.fraction = r.pruned as f64 / r.groups as f64;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniformOutcome {
    pub mask: Mask,
    /// Layers where the floor reduced the number of pruned groups.
    pub warnings: Vec<String>,
}

/// Prune `round(target · groups)` random groups from every prunable layer.
pub fn uniform_mask(network: &Network, granularity: Granularity, target: f64, seed: u64, floor: usize) -> Result<UniformOutcome> {
    if !(target > 0.0 && target < 1.0) {
        return Err(invalid(format!("target fraction {target} outside (0,1)")));
    }
    let groups = network.groups(granularity);
    let mut mask = Mask::keep_all(&groups, granularity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    for (l, layer) in network.layers().iter().enumerate() {
        if !layer.prunable {
            continue;
        }
        let mut members: Vec<usize> = (0..groups.len()).filter(|&i| groups[i].layer == l).collect();
        let n = members.len();
        let mut k = target_count(target, n);
        if n - k.min(n) < floor {
            let clamped = n.saturating_sub(floor);
            warnings.push(format!("layer {l}: floor {floor} limits pruning to {clamped} of {k} requested groups"));
            k = clamped;
        }
        members.shuffle(&mut rng);
        for &i in &members[..k] {
            mask.prune(i);
        }
    }
    Ok(UniformOutcome { mask, warnings })
}
