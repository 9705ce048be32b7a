//! Deterministic minibatch SGD and the prune-and-train protocol.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use schemars::JsonSchema;

use crate::diffcore::GradientVector;
use crate::error::{invalid, Error, Result};
use crate::importance::{self, Measure, ScoreInputs, GRASP_TEMPERATURE, SCORING_PER_CLASS};
use crate::masking::{apply_mask, build_mask, make_schedule, uniform_mask, Mask, DEFAULT_FLOOR};
use crate::netmodel::{Dataset, Granularity, Network};

/// How groups are chosen each round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", untagged)]
pub enum PruneMethod {
    Score(Measure),
    Uniform(UniformTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum UniformTag {
    Uniform,
}

impl PruneMethod {
    pub fn name(self) -> &'static str {
        match self {
            PruneMethod::Score(m) => m.name(),
            PruneMethod::Uniform(_) => "uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "uniform" {
            Ok(PruneMethod::Uniform(UniformTag::Uniform))
        } else {
            Ok(PruneMethod::Score(s.parse()?))
        }
    }
}

impl From<Measure> for PruneMethod {
    fn from(m: Measure) -> Self {
        PruneMethod::Score(m)
    }
}

/// When the training temperature is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureScope {
    #[default]
    PruningPhase,
    AllEpochs,
    Never,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RatePhase {
    pub rate: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Base schedule; the first phase loses one epoch per pruning round,
    /// which the pruning epochs replace.
    pub lr_schedule: Vec<RatePhase>,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub train_temperature: f64,
    pub temperature_scope: TemperatureScope,
    pub seed: u64,
    pub rounds: usize,
    pub target: f64,
    pub measure: PruneMethod,
    pub granularity: Granularity,
    pub floor: usize,
    /// Temperature for Hessian-gradient scores; defaults to 200 for GraSP
    /// and 1 for |GraSP|.
    pub grasp_temperature: Option<f64>,
    pub scoring_per_class: usize,
    pub eval_fraction: f64,
    /// Keep a parameter snapshot per epoch in the run log.
    pub record_history: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_schedule: vec![
                RatePhase { rate: 0.1, epochs: 30 },
                RatePhase { rate: 0.01, epochs: 10 },
                RatePhase { rate: 0.001, epochs: 10 },
            ],
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 5e-4,
            train_temperature: 5.0,
            temperature_scope: TemperatureScope::PruningPhase,
            seed: 0,
            rounds: 1,
            target: 0.5,
            measure: PruneMethod::Score(Measure::Magnitude),
            granularity: Granularity::Structured,
            floor: DEFAULT_FLOOR,
            grasp_temperature: None,
            scoring_per_class: SCORING_PER_CLASS,
            eval_fraction: 0.2,
            record_history: false,
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.lr_schedule.iter().map(|p| p.epochs).sum()
    }

    /// Learning rate of every epoch (0-based), pruning epochs included.
    pub fn epoch_rates(&self) -> Vec<f64> {
        self.lr_schedule.iter().flat_map(|p| std::iter::repeat_n(p.rate, p.epochs)).collect()
    }

    pub fn hessian_temperature(&self) -> f64 {
        self.grasp_temperature.unwrap_or(match self.measure {
            PruneMethod::Score(Measure::GraspAbs) => 1.0,
            _ => GRASP_TEMPERATURE,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let field = |path: &str, message: String| Error::Config { path: path.into(), message };
        if self.lr_schedule.is_empty() {
            return Err(field("lr_schedule", "at least one phase is required".into()));
        }
        for (i, p) in self.lr_schedule.iter().enumerate() {
            if !(p.rate > 0.0 && p.rate.is_finite()) {
                return Err(field(&format!("lr_schedule[{i}].rate"), format!("must be positive, got {}", p.rate)));
            }
        }
        if self.rounds > self.lr_schedule[0].epochs {
            return Err(field(
                "rounds",
                format!("{} rounds exceed the {} first-phase epochs", self.rounds, self.lr_schedule[0].epochs),
            ));
        }
        if self.batch_size == 0 {
            return Err(field("batch_size", "must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(field("momentum", format!("must lie in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(field("weight_decay", "must be nonnegative".into()));
        }
        if !(self.train_temperature > 0.0) {
            return Err(field("train_temperature", "must be positive".into()));
        }
        if self.rounds > 0 && !(self.target > 0.0 && self.target < 1.0) {
            return Err(field("target", format!("must lie in (0,1), got {}", self.target)));
        }
        if let Some(t) = self.grasp_temperature {
            if !(t > 0.0) {
                return Err(field("grasp_temperature", "must be positive".into()));
            }
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(field("eval_fraction", "must lie in (0,1)".into()));
        }
        if self.measure == PruneMethod::Score(Measure::Ebt) && self.granularity != Granularity::Structured {
            return Err(field("measure", "the σ-based proxy needs structured granularity".into()));
        }
        Ok(())
    }
}

/// Momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: GradientVector,
}

impl SgdState {
    pub fn new(like: &GradientVector) -> Self {
        Self { velocity: GradientVector::zeros_like(like) }
    }

    /// Clear buffers of pruned parameters.
    pub fn apply_keep(&mut self, keep: &[bool]) {
        let mut i = 0;
        for t in self.velocity.tensors_mut() {
            for v in t.data_mut() {
                if !keep[i] {
                    *v = 0.0;
                }
                i += 1;
            }
        }
    }
}

/// One SGD update `θ ← θ − η v`, `v ← μ v + (g + λ θ)`, skipping masked entries.
pub fn sgd_update(
    params: &mut GradientVector,
    grad: &GradientVector,
    state: &mut SgdState,
    rate: f64,
    momentum: f64,
    weight_decay: f64,
    keep: Option<&[bool]>,
) -> Result<()> {
    params.check_same_shape(grad)?;
    if !(rate > 0.0) {
        return Err(invalid(format!("learning rate must be positive, got {rate}")));
    }
    let mut i = 0;
    for ((p, g), v) in params.tensors_mut().iter_mut().zip(grad.tensors()).zip(state.velocity.tensors_mut()) {
        for ((pj, &gj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            if keep.is_some_and(|k| !k[i]) {
                *vj = 0.0;
            } else {
                let d = gj + weight_decay * *pj;
                *vj = momentum * *vj + d;
                *pj -= rate * *vj;
            }
            i += 1;
        }
    }
    Ok(())
}

/// One minibatch step on `network`; returns the pre-step minibatch loss.
#[allow(clippy::too_many_arguments)]
pub fn sgd_step(
    network: &mut Network,
    batch: &Dataset,
    rate: f64,
    momentum: f64,
    weight_decay: f64,
    keep: Option<&[bool]>,
    state: &mut SgdState,
    temperature: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let graph = network.loss_graph(batch, temperature)?;
    let (loss, grad) = graph.value_and_grad(network.params())?;
    sgd_update(network.params_mut(), &grad, state, rate, momentum, weight_decay, keep)?;
    Ok(loss)
}

/// Gradient of the mean loss over the whole dataset.
pub fn full_batch_gradient(network: &Network, data: &Dataset, temperature: f64) -> Result<GradientVector> {
    if data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    network.loss_graph(data, temperature)?.grad(network.params())
}

/// Average of per-minibatch gradients over a partition.
pub fn mean_minibatch_gradient(network: &Network, batches: &[Dataset], temperature: f64) -> Result<GradientVector> {
    let first = batches.first().ok_or_else(|| invalid("no minibatches"))?;
    let mut acc = full_batch_gradient(network, first, temperature)?;
    for b in &batches[1..] {
        acc.axpy(1.0, &full_batch_gradient(network, b, temperature)?)?;
    }
    Ok(acc.scaled(1.0 / batches.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rate: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub pruned_fraction: f64,
    pub param_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub epoch: usize,
    pub target: f64,
    pub pruned_groups: usize,
    pub shortfall: usize,
    pub floored_layers: Vec<usize>,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    pub rounds: Vec<RoundRecord>,
    /// σ per epoch boundary: index 0 is initialization, `k` is after epoch `k`.
    pub sigmas: Vec<Vec<Vec<f64>>>,
    /// Parameters per epoch boundary, when history recording is on.
    pub history: Vec<GradientVector>,
    pub steps: u64,
    pub final_mask: Mask,
}

impl RunLog {
    /// CSV with columns `epoch,train_loss,train_acc,eval_acc,pruned_fraction`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["epoch", "train_loss", "train_acc", "eval_acc", "pruned_fraction"])?;
        for e in &self.epochs {
            wr.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.train_acc.to_string(),
                e.eval_acc.to_string(),
                e.pruned_fraction.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Vec<(usize, f64, f64, f64, f64)>> {
        let mut rd = csv::Reader::from_reader(r);
        rd.deserialize().map(|row| row.map_err(Error::from)).collect()
    }

    /// CSV of σ per epoch: `epoch,layer,filter,sigma`.
    pub fn write_sigma_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["epoch", "layer", "filter", "sigma"])?;
        for (e, layers) in self.sigmas.iter().enumerate() {
            for (l, s) in layers.iter().enumerate() {
                for (f, v) in s.iter().enumerate() {
                    wr.write_record([e.to_string(), l.to_string(), f.to_string(), v.to_string()])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }

    pub fn final_eval_acc(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.eval_acc)
    }
}

/// Prune-and-train on a dataset split into train/eval by `config.seed`.
pub fn prune_and_train(network: &mut Network, data: &Dataset, config: &TrainConfig) -> Result<RunLog> {
    let (train, eval) = data.split(1.0 - config.eval_fraction, config.seed)?;
    prune_and_train_split(network, &train, &eval, config)
}

/// Run `config.rounds` rounds of (one epoch of training, then scoring and
/// mask extension), followed by the remaining epochs of the schedule.
pub fn prune_and_train_split(network: &mut Network, train: &Dataset, eval: &Dataset, config: &TrainConfig) -> Result<RunLog> {
    config.validate()?;
    if train.is_empty() {
        return Err(invalid("empty training set"));
    }
    let schedule = if config.rounds > 0 { Some(make_schedule(config.target, config.rounds)?) } else { None };
    let scoring = if matches!(config.measure, PruneMethod::Score(m) if m.needs_hessian()) && config.rounds > 0 {
        Some(train.class_balanced(config.scoring_per_class, config.seed)?)
    } else {
        None
    };
    let rates = config.epoch_rates();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = SgdState::new(network.params());
    let mut mask = Mask::for_network(network, config.granularity);
    let mut keep: Option<Vec<bool>> = None;

    let mut log = RunLog {
        epochs: Vec::with_capacity(rates.len()),
        rounds: Vec::new(),
        sigmas: vec![network.sigmas()],
        history: if config.record_history { vec![network.params().clone()] } else { Vec::new() },
        steps: 0,
        final_mask: mask.clone(),
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    for (e, &rate) in rates.iter().enumerate() {
        let pruning_epoch = e < config.rounds;
        let temperature = match config.temperature_scope {
            TemperatureScope::AllEpochs => config.train_temperature,
            TemperatureScope::PruningPhase if pruning_epoch => config.train_temperature,
            _ => 1.0,
        };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = train.subset(chunk)?;
            loss_sum += sgd_step(
                network,
                &batch,
                rate,
                config.momentum,
                config.weight_decay,
                keep.as_deref(),
                &mut state,
                temperature,
            )?;
            batches += 1;
            log.steps += 1;
        }
        let train_loss = loss_sum / batches as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite { step: log.steps as usize, what: format!("training loss at epoch {}", e + 1) });
        }

        if let (true, Some(sched)) = (pruning_epoch, &schedule) {
            let target = sched.cumulative[e];
            let prev_sigma = &log.sigmas[e];
            let outcome = match config.measure {
                PruneMethod::Uniform(_) => {
                    let u = uniform_mask(network, config.granularity, target, config.seed, config.floor)?;
                    crate::masking::MaskOutcome { mask: u.mask, shortfall: 0, floored_layers: Vec::new() }
                }
                PruneMethod::Score(measure) => {
                    let report = score_network(network, train, scoring.as_ref(), measure, config, prev_sigma, e)?;
                    build_mask(&report.with_step(log.steps), target, &mask, config.floor)?
                }
            };
            mask = outcome.mask;
            let k = mask.param_keep(network)?;
            apply_mask(network, &mask)?;
            state.apply_keep(&k);
            keep = Some(k);
            log.rounds.push(RoundRecord {
                round: e + 1,
                epoch: e + 1,
                target,
                pruned_groups: mask.pruned_groups(),
                shortfall: outcome.shortfall,
                floored_layers: outcome.floored_layers,
                mask: mask.clone(),
            });
        }

        log.epochs.push(EpochRecord {
            epoch: e + 1,
            rate,
            train_loss,
            train_acc: network.accuracy(train)?,
            eval_acc: network.accuracy(eval)?,
            pruned_fraction: mask.group_fraction(),
            param_fraction: mask.param_fraction(),
        });
        log.sigmas.push(network.sigmas());
        if config.record_history {
            log.history.push(network.params().clone());
        }
    }
    log.final_mask = mask;
    Ok(log)
}

fn score_network(
    network: &Network,
    train: &Dataset,
    scoring: Option<&Dataset>,
    measure: Measure,
    config: &TrainConfig,
    prev_sigma: &[Vec<f64>],
    epoch: usize,
) -> Result<importance::ImportanceReport> {
    let gradient = if measure.needs_gradient() { Some(full_batch_gradient(network, train, 1.0)?) } else { None };
    let hg = match (measure.needs_hessian(), scoring) {
        (true, Some(batch)) => Some(importance::hessian_gradient(network, batch, config.hessian_temperature())?.1),
        _ => None,
    };
    let inputs = ScoreInputs {
        gradient: gradient.as_ref(),
        hessian_gradient: hg.as_ref(),
        prev_sigma: Some(prev_sigma),
        seed: config.seed.wrapping_add(epoch as u64),
        temperature: Some(config.hessian_temperature()),
    };
    importance::score(measure, network, config.granularity, &inputs)
}
