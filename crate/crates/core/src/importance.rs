//! Importance measures computed per prune group.
//!
//! Every report follows one convention: the lower the score, the earlier the
//! group is pruned. Signed values (relevant for GraSP) are kept alongside in
//! `signed_raw`.

use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use schemars::JsonSchema;

use crate::diffcore::GradientVector;
use crate::error::{invalid, Error, Result};
use crate::netmodel::{Dataset, Granularity, Network, PruneGroup};

/// Default temperature for GraSP's Hessian-gradient product.
pub const GRASP_TEMPERATURE: f64 = 200.0;
/// Default scoring batch size per class.
pub const SCORING_PER_CLASS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    /// `Σ θᵢ²`
    Magnitude,
    /// `|θ_pᵀ g_p|`
    Loss,
    /// `Σ |θᵢ|·|θᵢ gᵢ|`
    Proposed,
    /// signed `θ_pᵀ (Hg)_p`
    Grasp,
    /// `|θ_pᵀ (Hg)_p|`
    GraspAbs,
    /// `|σ|·|σ − σ_prev|` per filter
    Ebt,
    Random,
}

impl Measure {
    pub const ALL: [Measure; 7] = [
        Measure::Magnitude,
        Measure::Loss,
        Measure::Proposed,
        Measure::Grasp,
        Measure::GraspAbs,
        Measure::Ebt,
        Measure::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Magnitude => "magnitude",
            Measure::Loss => "loss",
            Measure::Proposed => "proposed",
            Measure::Grasp => "grasp",
            Measure::GraspAbs => "grasp_abs",
            Measure::Ebt => "ebt",
            Measure::Random => "random",
        }
    }

    pub fn needs_gradient(self) -> bool {
        matches!(self, Measure::Loss | Measure::Proposed)
    }

    pub fn needs_hessian(self) -> bool {
        matches!(self, Measure::Grasp | Measure::GraspAbs)
    }
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown measure `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub layer: usize,
    pub group: usize,
    /// Ranking score: lower is pruned first.
    pub score: f64,
    /// Measure value before any absolute value is taken.
    pub signed_raw: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceReport {
    pub measure: Measure,
    pub scores: Vec<GroupScore>,
    pub temperature: Option<f64>,
    /// Training step at which the scores were taken.
    pub step: u64,
}

impl ImportanceReport {
    fn build(measure: Measure, groups: &[PruneGroup], raw: Vec<f64>, abs: bool) -> Result<Self> {
        let scores = groups
            .iter()
            .zip(raw)
            .map(|(g, r)| GroupScore { layer: g.layer, group: g.group, score: if abs { r.abs() } else { r }, signed_raw: r })
            .collect();
        let report = Self { measure, scores, temperature: None, step: 0 };
        report.check_finite()?;
        Ok(report)
    }

    fn check_finite(&self) -> Result<()> {
        match self.scores.iter().find(|s| !s.score.is_finite()) {
            Some(s) => Err(Error::NonFinite {
                step: self.step as usize,
                what: format!("{} score of layer {} group {}", self.measure, s.layer, s.group),
            }),
            None => Ok(()),
        }
    }

    pub fn with_step(mut self, step: u64) -> Self {
        self.step = step;
        self
    }

    pub fn values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.score).collect()
    }

    pub fn signed_values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.signed_raw).collect()
    }

    /// Multiply every score by `c > 0`.
    pub fn rescaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for s in &mut out.scores {
            s.score *= c;
        }
        out
    }

    /// Indices into `scores` ordered by pruning priority, ties by (layer, group).
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| {
            let (x, y) = (&self.scores[a], &self.scores[b]);
            x.score.total_cmp(&y.score).then(x.layer.cmp(&y.layer)).then(x.group.cmp(&y.group))
        });
        idx
    }

    /// CSV with columns `layer,group,score,signed_raw,measure,temperature,step`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["layer", "group", "score", "signed_raw", "measure", "temperature", "step"])?;
        let temp = self.temperature.map(|t| t.to_string()).unwrap_or_default();
        for s in &self.scores {
            wr.write_record([
                s.layer.to_string(),
                s.group.to_string(),
                s.score.to_string(),
                s.signed_raw.to_string(),
                self.measure.name().to_string(),
                temp.clone(),
                self.step.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            layer: usize,
            group: usize,
            score: f64,
            signed_raw: f64,
            measure: String,
            temperature: Option<f64>,
            step: u64,
        }
        let mut rd = csv::Reader::from_reader(r);
        let mut scores = Vec::new();
        let mut meta = None;
        for row in rd.deserialize::<Row>() {
            let row = row?;
            meta.get_or_insert((row.measure.clone(), row.temperature, row.step));
            scores.push(GroupScore { layer: row.layer, group: row.group, score: row.score, signed_raw: row.signed_raw });
        }
        let (measure, temperature, step) = meta.ok_or_else(|| Error::Format("empty importance CSV".into()))?;
        Ok(Self { measure: measure.parse()?, scores, temperature, step })
    }
}

fn group_sum(groups: &[PruneGroup], f: impl Fn(usize) -> f64) -> Vec<f64> {
    groups.iter().map(|g| g.indices.iter().map(|&i| f(i)).sum()).collect()
}

/// `Σ_{i∈p} θᵢ²`
pub fn magnitude_scores(theta: &GradientVector, groups: &[PruneGroup]) -> Result<ImportanceReport> {
    let t = theta.flatten();
    ImportanceReport::build(Measure::Magnitude, groups, group_sum(groups, |i| t[i] * t[i]), false)
}

/// `|Σ_{i∈p} θᵢ gᵢ|`
pub fn loss_preservation_scores(
    theta: &GradientVector,
    grad: &GradientVector,
    groups: &[PruneGroup],
) -> Result<ImportanceReport> {
    theta.check_same_shape(grad)?;
    let (t, g) = (theta.flatten(), grad.flatten());
    ImportanceReport::build(Measure::Loss, groups, group_sum(groups, |i| t[i] * g[i]), true)
}

/// `Σ_{i∈p} |θᵢ|·|θᵢ gᵢ|`
pub fn proposed_scores(theta: &GradientVector, grad: &GradientVector, groups: &[PruneGroup]) -> Result<ImportanceReport> {
    theta.check_same_shape(grad)?;
    let (t, g) = (theta.flatten(), grad.flatten());
    ImportanceReport::build(Measure::Proposed, groups, group_sum(groups, |i| t[i].abs() * (t[i] * g[i]).abs()), false)
}

/// `θ_pᵀ (Hg)_p`, signed (`absolute = false`) or absolute.
pub fn grasp_scores(
    theta: &GradientVector,
    hg: &GradientVector,
    groups: &[PruneGroup],
    absolute: bool,
) -> Result<ImportanceReport> {
    theta.check_same_shape(hg)?;
    let (t, h) = (theta.flatten(), hg.flatten());
    let measure = if absolute { Measure::GraspAbs } else { Measure::Grasp };
    ImportanceReport::build(measure, groups, group_sum(groups, |i| t[i] * h[i]), absolute)
}

/// Seeded i.i.d. uniform `[0, 1)` scores.
pub fn random_scores(groups: &[PruneGroup], seed: u64) -> ImportanceReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = groups.iter().map(|_| rng.random::<f64>()).collect();
    ImportanceReport::build(Measure::Random, groups, raw, false).expect("uniform draws are finite")
}

pub fn magnitude(network: &Network, granularity: Granularity) -> Result<ImportanceReport> {
    magnitude_scores(network.params(), &network.groups(granularity))
}

pub fn loss_preservation(network: &Network, gradient: &GradientVector, granularity: Granularity) -> Result<ImportanceReport> {
    loss_preservation_scores(network.params(), gradient, &network.groups(granularity))
}

pub fn proposed_extension(network: &Network, gradient: &GradientVector, granularity: Granularity) -> Result<ImportanceReport> {
    proposed_scores(network.params(), gradient, &network.groups(granularity))
}

pub fn random_importance(network: &Network, granularity: Granularity, seed: u64) -> ImportanceReport {
    random_scores(&network.groups(granularity), seed)
}

/// Gradient `g` and Hessian-gradient product `Hg` of the temperature-scaled
/// loss on `batch`.
pub fn hessian_gradient(network: &Network, batch: &Dataset, temperature: f64) -> Result<(GradientVector, GradientVector)> {
    if !(temperature > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    let graph = network.loss_graph(batch, temperature)?;
    let g = graph.grad(network.params())?;
    let (_, _, hg) = graph.grad_and_hvp(network.params(), &g)?;
    Ok((g, hg))
}

/// GraSP on the scoring batch with logits divided by `temperature`.
pub fn grasp(network: &Network, batch: &Dataset, temperature: f64, granularity: Granularity) -> Result<ImportanceReport> {
    let (_, hg) = hessian_gradient(network, batch, temperature)?;
    let mut r = grasp_scores(network.params(), &hg, &network.groups(granularity), false)?;
    r.temperature = Some(temperature);
    Ok(r)
}

/// Gradient-norm preservation `|θ_pᵀ (Hg)_p|`.
pub fn grasp_preserve(
    network: &Network,
    batch: &Dataset,
    temperature: f64,
    granularity: Granularity,
) -> Result<ImportanceReport> {
    let (_, hg) = hessian_gradient(network, batch, temperature)?;
    let mut r = grasp_scores(network.params(), &hg, &network.groups(granularity), true)?;
    r.temperature = Some(temperature);
    Ok(r)
}

/// `|σ|·|σ − σ_prev|` for every filter, with `prev_sigma` indexed `[layer][filter]`.
pub fn ebt_proxy(network: &Network, prev_sigma: &[Vec<f64>]) -> Result<ImportanceReport> {
    let now = network.sigmas();
    if prev_sigma.len() != now.len() || prev_sigma.iter().zip(&now).any(|(a, b)| a.len() != b.len()) {
        return Err(invalid("σ snapshot does not match the network"));
    }
    let groups = network.groups(Granularity::Structured);
    let raw = groups
        .iter()
        .map(|g| {
            let s = now[g.layer][g.group];
            s.abs() * (s - prev_sigma[g.layer][g.group]).abs()
        })
        .collect();
    ImportanceReport::build(Measure::Ebt, &groups, raw, false)
}

/// Inputs a measure may need beyond the network itself.
#[derive(Clone, Debug, Default)]
pub struct ScoreInputs<'a> {
    pub gradient: Option<&'a GradientVector>,
    pub hessian_gradient: Option<&'a GradientVector>,
    pub prev_sigma: Option<&'a [Vec<f64>]>,
    pub seed: u64,
    pub temperature: Option<f64>,
}

/// Dispatch by measure id; missing inputs are reported as errors.
pub fn score(
    measure: Measure,
    network: &Network,
    granularity: Granularity,
    inputs: &ScoreInputs<'_>,
) -> Result<ImportanceReport> {
    let missing = |what: &str| invalid(format!("measure {measure} requires {what}"));
    let groups = network.groups(granularity);
    let theta = network.params();
    let mut report = match measure {
        Measure::Magnitude => magnitude_scores(theta, &groups)?,
        Measure::Loss => loss_preservation_scores(theta, inputs.gradient.ok_or_else(|| missing("a gradient"))?, &groups)?,
        Measure::Proposed => proposed_scores(theta, inputs.gradient.ok_or_else(|| missing("a gradient"))?, &groups)?,
        Measure::Grasp | Measure::GraspAbs => {
            let hg = inputs.hessian_gradient.ok_or_else(|| missing("a Hessian-gradient product"))?;
            grasp_scores(theta, hg, &groups, measure == Measure::GraspAbs)?
        }
        Measure::Ebt => {
            if granularity != Granularity::Structured {
                return Err(invalid("the σ-based proxy is defined per filter"));
            }
            ebt_proxy(network, inputs.prev_sigma.ok_or_else(|| missing("a σ snapshot"))?)?
        }
        Measure::Random => random_scores(&groups, inputs.seed),
    };
    report.temperature = inputs.temperature.filter(|_| measure.needs_hessian());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{GraphBuilder, Tensor};
    use crate::netmodel::{build_mlp, Activation};

    fn groups_of(sizes: &[usize]) -> Vec<PruneGroup> {
        let mut off = 0;
        sizes
            .iter()
            .enumerate()
            .map(|(g, &n)| {
                let out = PruneGroup { layer: 0, group: g, indices: (off..off + n).collect(), prunable: true };
                off += n;
                out
            })
            .collect()
    }

    fn vecof(v: &[f64]) -> GradientVector {
        GradientVector::new(vec![Tensor::from_vec(v.to_vec())])
    }

    #[test]
    fn magnitude_examples() {
        let r = magnitude_scores(&vecof(&[3.0, 4.0, 0.0, 0.0]), &groups_of(&[2, 2])).unwrap();
        assert_eq!(r.values(), vec![25.0, 0.0]);
        let doubled = magnitude_scores(&vecof(&[6.0, 8.0, 0.0, 0.0]), &groups_of(&[2, 2])).unwrap();
        assert_eq!(doubled.values(), vec![100.0, 0.0]);
        assert_eq!(r.ranking(), doubled.ranking());
    }

    #[test]
    fn loss_and_proposed_examples() {
        let theta = vecof(&[1.0, -2.0]);
        let g = vecof(&[0.5, 0.5]);
        let groups = groups_of(&[2]);
        assert_eq!(loss_preservation_scores(&theta, &g, &groups).unwrap().values(), vec![0.5]);
        assert_eq!(proposed_scores(&theta, &g, &groups).unwrap().values(), vec![2.5]);
        let single = proposed_scores(&vecof(&[2.0]), &vecof(&[3.0]), &groups_of(&[1])).unwrap();
        assert_eq!(single.values(), vec![12.0]);
        let zero = vecof(&[0.0, 0.0]);
        assert_eq!(loss_preservation_scores(&theta, &zero, &groups).unwrap().values(), vec![0.0]);
        assert_eq!(proposed_scores(&theta, &zero, &groups).unwrap().values(), vec![0.0]);
        assert!(loss_preservation_scores(&theta, &vecof(&[1.0]), &groups).is_err());
    }

    #[test]
    fn grasp_on_identity_quadratic() {
        // L = ½θᵀθ: g = θ, Hg = θ
        let mut b = GraphBuilder::new(vec![vec![2]]);
        let p = b.param(0).unwrap();
        let sq = b.mul(p, p).unwrap();
        let s = b.sum(sq);
        let out = b.scale(s, 0.5);
        let graph = b.finish(out);
        let theta = vecof(&[1.0, 2.0]);
        let g = graph.grad(&theta).unwrap();
        let hg = graph.hvp(&theta, &g).unwrap();
        let r = grasp_scores(&theta, &hg, &groups_of(&[2]), false).unwrap();
        assert_eq!(r.values(), vec![5.0]);
        let zero = vecof(&[0.0, 0.0]);
        let hz = graph.hvp(&zero, &graph.grad(&zero).unwrap()).unwrap();
        assert_eq!(grasp_scores(&zero, &hz, &groups_of(&[2]), false).unwrap().values(), vec![0.0]);
    }

    #[test]
    fn grasp_abs_takes_absolute_value() {
        let theta = vecof(&[1.0, 2.0]);
        let hg = vecof(&[-3.2, 0.0]);
        let groups = groups_of(&[1, 1]);
        let signed = grasp_scores(&theta, &hg, &groups, false).unwrap();
        let abs = grasp_scores(&theta, &hg, &groups, true).unwrap();
        assert_eq!(signed.values()[0], -3.2);
        assert_eq!(abs.values()[0], 3.2);
        assert_eq!(abs.signed_values()[0], -3.2);
        let pos = grasp_scores(&theta, &vecof(&[1.0, 0.5]), &groups, false).unwrap();
        let pos_abs = grasp_scores(&theta, &vecof(&[1.0, 0.5]), &groups, true).unwrap();
        assert_eq!(pos.ranking(), pos_abs.ranking());
    }

    #[test]
    fn random_scores_seeded() {
        let groups = groups_of(&[1; 20]);
        assert_eq!(random_scores(&groups, 3), random_scores(&groups, 3));
        assert_ne!(random_scores(&groups, 3).values(), random_scores(&groups, 4).values());
        assert!(random_scores(&groups, 3).values().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn ebt_examples() {
        let mut net = build_mlp(&[2, 3, 2], Activation::Tanh, 1).unwrap();
        let prev = net.sigmas();
        let r = ebt_proxy(&net, &prev).unwrap();
        assert!(r.values().iter().all(|&v| v == 0.0));
        let mut p = net.params().clone();
        p.tensors_mut()[2].data_mut()[0] = 0.5;
        net.set_params(p).unwrap();
        let mut prev2 = net.sigmas();
        prev2[0][0] = 0.4;
        let r = ebt_proxy(&net, &prev2).unwrap();
        assert!((r.values()[0] - 0.05).abs() < 1e-15);
        assert!(ebt_proxy(&net, &prev[..1]).is_err());
    }

    #[test]
    fn dispatch_rejects_missing_inputs() {
        let net = build_mlp(&[2, 3, 2], Activation::Tanh, 1).unwrap();
        let none = ScoreInputs::default();
        for m in [Measure::Loss, Measure::Proposed, Measure::Grasp, Measure::GraspAbs, Measure::Ebt] {
            assert!(score(m, &net, Granularity::Structured, &none).is_err(), "{m}");
        }
        assert!(score(Measure::Magnitude, &net, Granularity::Unstructured, &none).is_ok());
        let data = crate::netmodel::make_blobs(2, 2, 4, 0.2, 0).unwrap();
        assert!(grasp(&net, &data, 0.0, Granularity::Structured).is_err());
        assert!(grasp(&net, &data, -1.0, Granularity::Structured).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let net = build_mlp(&[2, 3, 2], Activation::Tanh, 1).unwrap();
        let r = magnitude(&net, Granularity::Structured).unwrap().with_step(17);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let back = ImportanceReport::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn measure_names_parse() {
        for m in Measure::ALL {
            assert_eq!(m.name().parse::<Measure>().unwrap(), m);
        }
        assert!("snip".parse::<Measure>().is_err());
    }
}
