//! Correlation and layer-wise breakdown experiments.
//!
//! Every statistic is paired with a CSV writer whose output can be read back
//! and re-correlated to the same bits.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::diffcore::{add_scaled, GradientVector};
use crate::error::{invalid, shape_err, Result};
use crate::importance::hessian_gradient;
use crate::masking::{layerwise_ratios, mask_distance, Mask};
use crate::netmodel::{Dataset, Granularity, Network, PruneGroup};
use crate::trainer::full_batch_gradient;

/// Fraction of filters in the σ-magnitude pruning-mask proxy.
pub const EBT_MASK_RATIO: f64 = 0.2;

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(shape_err(format!("correlation inputs of lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(invalid(format!("correlation needs at least 3 samples, got {}", x.len())));
    }
    Ok(())
}

/// Pearson product-moment coefficient, or `None` when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// 1-based ranks with ties given their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    check_pair(x, y)?;
    pearson(&ranks(x), &ranks(y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub measure_a: String,
    pub measure_b: String,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub samples: usize,
    pub step: u64,
    pub granularity: Granularity,
}

impl CorrelationResult {
    pub fn compute(a: &str, b: &str, x: &[f64], y: &[f64], step: u64, granularity: Granularity) -> Result<Self> {
        Ok(Self {
            measure_a: a.to_string(),
            measure_b: b.to_string(),
            pearson: pearson(x, y)?,
            spearman: spearman(x, y)?,
            samples: x.len(),
            step,
            granularity,
        })
    }
}

/// Mean of the defined values, or `None` if there are none.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Summary CSV, one row per correlation; undefined values are empty fields.
pub fn write_summary_csv<W: Write>(results: &[CorrelationResult], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in results {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_summary_csv<R: Read>(r: R) -> Result<Vec<CorrelationResult>> {
    csv::Reader::from_reader(r).deserialize().map(|row| row.map_err(Into::into)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub layer: usize,
    pub group: usize,
    pub score_a: f64,
    pub score_b: f64,
}

/// Paired per-group scores behind one correlation.
#[derive(Clone, Debug, PartialEq)]
pub struct Scatter {
    pub points: Vec<ScatterPoint>,
}

impl Scatter {
    fn from_groups(groups: &[&PruneGroup], a: &[f64], b: &[f64]) -> Self {
        let points = groups
            .iter()
            .zip(a.iter().zip(b))
            .map(|(g, (&score_a, &score_b))| ScatterPoint { layer: g.layer, group: g.group, score_a, score_b })
            .collect();
        Self { points }
    }

    pub fn a(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.score_a).collect()
    }

    pub fn b(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.score_b).collect()
    }

    pub fn correlate(&self, a: &str, b: &str, step: u64, granularity: Granularity) -> Result<CorrelationResult> {
        CorrelationResult::compute(a, b, &self.a(), &self.b(), step, granularity)
    }

    /// CSV with columns `layer,group,score_a,score_b`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for p in &self.points {
            wr.serialize(p)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let points = csv::Reader::from_reader(r).deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { points })
    }
}

fn prunable(network: &Network, granularity: Granularity) -> Vec<PruneGroup> {
    network.groups(granularity).into_iter().filter(|g| g.prunable).collect()
}

fn group_dot(groups: &[&PruneGroup], a: &[f64], b: &[f64]) -> Vec<f64> {
    groups.iter().map(|g| g.indices.iter().map(|&i| a[i] * b[i]).sum()).collect()
}

/// Signed `θ_pᵀ(Hg)_p` against signed `θ_pᵀg_p` over prunable groups.
pub fn grasp_vs_loss_correlation(
    network: &Network,
    data: &Dataset,
    temperature: f64,
    granularity: Granularity,
    step: u64,
) -> Result<(CorrelationResult, Scatter)> {
    let (g, hg) = hessian_gradient(network, data, temperature)?;
    let theta = network.params().flatten();
    let groups = prunable(network, granularity);
    let refs: Vec<&PruneGroup> = groups.iter().collect();
    let a = group_dot(&refs, &theta, &hg.flatten());
    let b = group_dot(&refs, &theta, &g.flatten());
    let scatter = Scatter::from_groups(&refs, &a, &b);
    Ok((scatter.correlate("theta_hg", "theta_g", step, granularity)?, scatter))
}

/// Per-filter σ values of the prunable layers, in group order.
fn prunable_sigmas(network: &Network, sigmas: &[Vec<f64>]) -> Vec<f64> {
    prunable(network, Granularity::Structured).iter().map(|g| sigmas[g.layer][g.group]).collect()
}

/// Mask pruning the `ratio` fraction of prunable filters with the smallest `|σ|`.
pub fn sigma_mask(network: &Network, sigmas: &[Vec<f64>], ratio: f64) -> Result<Mask> {
    let mut mask = Mask::for_network(network, Granularity::Structured);
    let flags = mask.flags().to_vec();
    if sigmas.len() != network.layers().len() {
        return Err(shape_err("σ snapshot does not match the network"));
    }
    let mut order: Vec<usize> = (0..flags.len()).filter(|&i| flags[i].prunable).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (flags[a], flags[b]);
        sigmas[fa.layer][fa.group].abs().total_cmp(&sigmas[fb.layer][fb.group].abs()).then(a.cmp(&b))
    });
    let count = crate::masking::target_count(ratio, order.len());
    for &i in &order[..count] {
        mask.prune(i);
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EbtPoint {
    pub epoch: usize,
    pub correlation: CorrelationResult,
    /// Hamming distance to the previous epoch's σ mask.
    pub mask_distance: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EbtTrace {
    pub points: Vec<EbtPoint>,
}

impl EbtTrace {
    /// Spearman of (epoch, Pearson correlation) over epochs where it is defined.
    pub fn correlation_trend(&self) -> Option<f64> {
        let (e, c): (Vec<f64>, Vec<f64>) =
            self.points.iter().filter_map(|p| p.correlation.pearson.map(|c| (p.epoch as f64, c))).unzip();
        spearman(&e, &c).ok().flatten()
    }

    /// Spearman of (epoch, mask distance); a constant series has no trend.
    pub fn distance_trend(&self) -> Option<f64> {
        let e: Vec<f64> = self.points.iter().map(|p| p.epoch as f64).collect();
        let d: Vec<f64> = self.points.iter().map(|p| p.mask_distance as f64).collect();
        match spearman(&e, &d) {
            Ok(Some(r)) => Some(r),
            Ok(None) => Some(0.0),
            Err(_) => None,
        }
    }

    /// CSV with columns `epoch,pearson,spearman,mask_distance`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["epoch", "pearson", "spearman", "mask_distance"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for p in &self.points {
            wr.write_record([
                p.epoch.to_string(),
                opt(p.correlation.pearson),
                opt(p.correlation.spearman),
                p.mask_distance.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// For every `every`-th epoch `k ≥ 1`, Pearson(|σ_k||σ_k − σ_{k−1}|, |θ_pᵀg_p|)
/// over prunable filters, and the distance between the bottom-`ratio` σ masks
/// of epochs `k − 1` and `k`.
///
/// `history[k]` and `sigmas[k]` hold the state after epoch `k`, index 0 being
/// initialization. Gradients are full-batch on `data` at temperature 1.
pub fn ebt_correlation_trace(
    network: &Network,
    history: &[GradientVector],
    sigmas: &[Vec<Vec<f64>>],
    data: &Dataset,
    every: usize,
    ratio: f64,
) -> Result<EbtTrace> {
    if history.len() < 2 || sigmas.len() < 2 {
        return Err(invalid("the σ trace needs at least 2 epochs"));
    }
    if history.len() != sigmas.len() {
        return Err(shape_err("parameter and σ histories differ in length"));
    }
    let every = every.max(1);
    let mut net = network.clone();
    let groups = prunable(network, Granularity::Structured);
    let refs: Vec<&PruneGroup> = groups.iter().collect();
    let mut points = Vec::new();
    for k in (1..history.len()).filter(|k| k % every == 0) {
        net.set_params(history[k].clone())?;
        let g = full_batch_gradient(&net, data, 1.0)?;
        let theta = history[k].flatten();
        let loss: Vec<f64> = group_dot(&refs, &theta, &g.flatten()).iter().map(|v| v.abs()).collect();
        let now = prunable_sigmas(network, &sigmas[k]);
        let prev = prunable_sigmas(network, &sigmas[k - 1]);
        let ebt: Vec<f64> = now.iter().zip(&prev).map(|(s, p)| s.abs() * (s - p).abs()).collect();
        let distance = mask_distance(&sigma_mask(network, &sigmas[k - 1], ratio)?, &sigma_mask(network, &sigmas[k], ratio)?)?;
        points.push(EbtPoint {
            epoch: k,
            correlation: CorrelationResult::compute("ebt", "loss", &ebt, &loss, k as u64, Granularity::Structured)?,
            mask_distance: distance,
        });
    }
    Ok(EbtTrace { points })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceCorrelation {
    pub correlation: CorrelationResult,
    /// `|A ∩ B| / |A|` for the prune sets induced by each score at the target.
    pub overlap: f64,
    pub scatter: Scatter,
}

/// Flat indices of every non-σ parameter.
fn weight_entries(network: &Network) -> Vec<bool> {
    let mut out = Vec::with_capacity(network.parameter_count());
    for (i, t) in network.params().tensors().iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 3 != 2, t.len()));
    }
    out
}

/// Indices of the `round(target · n)` smallest values, ties by position.
pub fn bottom_set(values: &[f64], target: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order.truncate(crate::masking::target_count(target, values.len()));
    order.sort_unstable();
    order
}

/// Fraction of `a` also in `b`; both sorted. Empty `a` overlaps fully.
pub fn overlap_fraction(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let shared = a.iter().filter(|i| b.binary_search(i).is_ok()).count();
    shared as f64 / a.len() as f64
}

/// Pearson over prunable groups of `‖θ_p‖²` against `‖θ_p − θ_p(0)‖²`.
///
/// Both sums run over weights and biases. The σ entries start at 1, so their
/// magnitude measures distance from 1 rather than from 0.
pub fn l2_vs_distance_correlation(
    network: &Network,
    granularity: Granularity,
    target: f64,
    step: u64,
) -> Result<DistanceCorrelation> {
    let weights = weight_entries(network);
    let theta = network.params().flatten();
    let delta = add_scaled(network.params(), -1.0, network.init_snapshot())?.flatten();
    let groups: Vec<PruneGroup> = prunable(network, granularity)
        .into_iter()
        .filter(|g| g.indices.iter().any(|&i| weights[i]))
        .collect();
    let sq = |v: &[f64], g: &PruneGroup| g.indices.iter().filter(|&&i| weights[i]).map(|&i| v[i] * v[i]).sum::<f64>();
    let l2: Vec<f64> = groups.iter().map(|g| sq(&theta, g)).collect();
    let dist: Vec<f64> = groups.iter().map(|g| sq(&delta, g)).collect();
    let refs: Vec<&PruneGroup> = groups.iter().collect();
    let scatter = Scatter::from_groups(&refs, &l2, &dist);
    Ok(DistanceCorrelation {
        correlation: scatter.correlate("l2", "distance", step, granularity)?,
        overlap: overlap_fraction(&bottom_set(&l2, target), &bottom_set(&dist, target)),
        scatter,
    })
}

/// [`l2_vs_distance_correlation`] at every recorded epoch after the first,
/// with `history[0]` taken as the initialization.
pub fn l2_vs_distance_trace(
    network: &Network,
    history: &[GradientVector],
    granularity: Granularity,
    target: f64,
) -> Result<Vec<DistanceCorrelation>> {
    let init = history.first().ok_or_else(|| invalid("empty parameter history"))?;
    let mut net = network.clone();
    net.set_params(init.clone())?;
    net.reset_init_snapshot();
    history[1..]
        .iter()
        .enumerate()
        .map(|(k, p)| {
            net.set_params(p.clone())?;
            l2_vs_distance_correlation(&net, granularity, target, k as u64 + 1)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerwiseMode {
    Ratios,
    Gradnorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseRow {
    /// Epoch for gradient norms; 0 for ratios.
    pub epoch: usize,
    pub layer: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerwiseReport {
    pub mode: LayerwiseMode,
    pub rows: Vec<LayerwiseRow>,
}

impl LayerwiseReport {
    /// Pruned fraction of each layer's prunable groups.
    pub fn ratios(mask: &Mask) -> Self {
        let rows = layerwise_ratios(mask)
            .into_iter()
            .map(|r| LayerwiseRow { epoch: 0, layer: r.layer, value: r.fraction })
            .collect();
        Self { mode: LayerwiseMode::Ratios, rows }
    }

    /// Per-layer `‖g_l‖²` of the full-batch gradient for every parameter snapshot.
    pub fn gradnorm(network: &Network, history: &[GradientVector], data: &Dataset) -> Result<Self> {
        let layer_of = network.layer_of_params();
        let mut net = network.clone();
        let mut rows = Vec::new();
        for (e, p) in history.iter().enumerate() {
            net.set_params(p.clone())?;
            let g = full_batch_gradient(&net, data, 1.0)?;
            let mut per = vec![0.0; network.layers().len()];
            for (gi, &l) in g.iter().zip(&layer_of) {
                per[l] += gi * gi;
            }
            rows.extend(per.into_iter().enumerate().map(|(layer, value)| LayerwiseRow { epoch: e, layer, value }));
        }
        Ok(Self { mode: LayerwiseMode::Gradnorm, rows })
    }

    /// Values of one epoch, indexed by layer.
    pub fn epoch_values(&self, epoch: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.epoch == epoch).map(|r| r.value).collect()
    }

    /// CSV with columns `epoch,layer,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, mode: LayerwiseMode) -> Result<Self> {
        let rows = csv::Reader::from_reader(r).deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { mode, rows })
    }
}

/// Mean pruned fraction over the first `⌈n/2⌉` prunable layers.
pub fn early_layer_ratio(mask: &Mask) -> f64 {
    let ratios = layerwise_ratios(mask);
    let half = ratios.len().div_ceil(2);
    ratios[..half].iter().map(|r| r.fraction).sum::<f64>() / half.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::netmodel::{build_mlp, build_mlp_scaled, make_blobs, Activation};

    #[test]
    fn pearson_hand_values() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap().unwrap() - 0.8).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap().unwrap() - 1.0).abs() < 1e-15);
        let z: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &z).unwrap().unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 8.0, 27.0, 64.0]).unwrap().unwrap();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn overlap_matches_brute_force() {
        let a = bottom_set(&[0.3, 0.1, 0.4, 0.2], 0.5);
        let b = bottom_set(&[0.1, 0.2, 0.9, 0.3], 0.5);
        assert_eq!(a, vec![1, 3]);
        assert_eq!(b, vec![0, 1]);
        assert_eq!(overlap_fraction(&a, &b), 0.5);
    }

    #[test]
    fn zero_init_gives_equal_scores() {
        let mut net = build_mlp_scaled(&[2, 6, 3], Activation::Tanh, 1, 0.0).unwrap();
        let mut p = net.params().clone();
        for t in p.tensors_mut() {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x += 0.1 * (i as f64 + 1.0);
            }
        }
        // biases start at 0 too, so ‖θ‖² and ‖θ − θ(0)‖² agree on weights and biases
        let sig: Vec<usize> = (0..net.layers().len()).map(|l| 3 * l + 2).collect();
        for &s in &sig {
            p.tensors_mut()[s] = net.params().tensors()[s].clone();
        }
        net.set_params(p).unwrap();
        let r = l2_vs_distance_correlation(&net, Granularity::Structured, 0.5, 0).unwrap();
        assert!((r.correlation.pearson.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.overlap, 1.0);
    }

    #[test]
    fn untrained_distance_is_undefined() {
        let net = build_mlp(&[2, 6, 3], Activation::Tanh, 1).unwrap();
        let r = l2_vs_distance_correlation(&net, Granularity::Structured, 0.5, 0).unwrap();
        assert_eq!(r.correlation.pearson, None);
    }

    #[test]
    fn gradnorm_rows_sum_to_total() {
        let data = make_blobs(3, 2, 10, 0.3, 4).unwrap();
        let net = build_mlp(&[2, 6, 5, 3], Activation::Tanh, 2).unwrap();
        let rep = LayerwiseReport::gradnorm(&net, &[net.params().clone()], &data).unwrap();
        let total = full_batch_gradient(&net, &data, 1.0).unwrap().norm2();
        let sum: f64 = rep.epoch_values(0).iter().sum();
        assert!((sum - total).abs() <= 1e-12 * total);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert_eq!(LayerwiseReport::read_csv(buf.as_slice(), LayerwiseMode::Gradnorm).unwrap(), rep);
    }

    #[test]
    fn frozen_sigma_trace() {
        let data = make_blobs(3, 2, 10, 0.3, 4).unwrap();
        let net = build_mlp(&[2, 6, 3], Activation::Tanh, 2).unwrap();
        let history = vec![net.params().clone(); 3];
        let sigmas = vec![net.sigmas(); 3];
        let trace = ebt_correlation_trace(&net, &history, &sigmas, &data, 1, EBT_MASK_RATIO).unwrap();
        assert_eq!(trace.points.len(), 2);
        assert!(trace.points.iter().all(|p| p.correlation.pearson.is_none() && p.mask_distance == 0));
        assert!(ebt_correlation_trace(&net, &history[..1], &sigmas[..1], &data, 1, 0.2).is_err());
    }

    #[test]
    fn ebt_two_epoch_hand_oracle() {
        // one hidden layer of 4 filters; the head is not part of the trace
        let data = make_blobs(2, 2, 6, 0.3, 9).unwrap();
        let net = build_mlp(&[2, 4, 2], Activation::Tanh, 5).unwrap();
        let mut later = net.params().clone();
        later.tensors_mut()[2] = Tensor::from_vec(vec![1.0, 2.0, 0.5, 1.5]);
        let mut s1 = net.sigmas();
        s1[0] = vec![1.0, 2.0, 0.5, 1.5];
        let trace = ebt_correlation_trace(&net, &[net.params().clone(), later.clone()], &[net.sigmas(), s1], &data, 1, 0.25).unwrap();
        // |σ||Δσ| = (0, 2, 0.25, 0.75)
        let mut n1 = net.clone();
        n1.set_params(later).unwrap();
        let g = full_batch_gradient(&n1, &data, 1.0).unwrap();
        let groups = prunable(&n1, Granularity::Structured);
        let (t, gf) = (n1.params().flatten(), g.flatten());
        let loss: Vec<f64> = groups.iter().map(|p| p.indices.iter().map(|&i| t[i] * gf[i]).sum::<f64>().abs()).collect();
        let want = pearson(&[0.0, 2.0, 0.25, 0.75], &loss).unwrap();
        assert_eq!(trace.points[0].correlation.pearson, want);
        // bottom filter moves from 0 (all ties) to filter 2
        assert_eq!(trace.points[0].mask_distance, 2);
    }

    #[test]
    fn scatter_and_summary_reingest_exactly() {
        let data = make_blobs(3, 2, 10, 0.3, 4).unwrap();
        let net = build_mlp(&[2, 6, 5, 3], Activation::Tanh, 2).unwrap();
        let (c, scatter) = grasp_vs_loss_correlation(&net, &data, 1.0, Granularity::Unstructured, 7).unwrap();
        let mut buf = Vec::new();
        scatter.write_csv(&mut buf).unwrap();
        let back = Scatter::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, scatter);
        assert_eq!(back.correlate("theta_hg", "theta_g", 7, Granularity::Unstructured).unwrap(), c);
        let mut sum = Vec::new();
        let undefined = CorrelationResult { pearson: None, ..c.clone() };
        write_summary_csv(&[c.clone(), undefined.clone()], &mut sum).unwrap();
        assert_eq!(read_summary_csv(sum.as_slice()).unwrap(), vec![c, undefined]);
    }

    #[test]
    fn uniform_mask_gives_flat_ratios() {
        let net = build_mlp(&[2, 10, 10, 3], Activation::Tanh, 2).unwrap();
        let u = crate::masking::uniform_mask(&net, Granularity::Structured, 0.5, 3, 1).unwrap();
        let rep = LayerwiseReport::ratios(&u.mask);
        assert!(rep.rows.iter().all(|r| (r.value - 0.5).abs() < 1e-12));
    }
}
