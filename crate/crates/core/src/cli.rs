//! Config-driven experiment runner behind the `flowprune` binary.
//!
//! Every subcommand reads a JSON config, applies `--seed` and `--set`
//! overrides, and writes its artifacts under `<out>/<command>-<hash>` where
//! the hash covers the resolved config. Run directories are append-only: an
//! artifact is written once and a rerun must reproduce it byte for byte.
//! Each invocation appends one line to `manifest.jsonl` with the config
//! hash, the seeds, the sha256 of every artifact and wall-clock timings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use schemars::JsonSchema;
use serde_json::Value;

use crate::analysis::{
    ebt_correlation_trace, grasp_vs_loss_correlation, l2_vs_distance_trace, write_summary_csv, CorrelationResult,
    LayerwiseReport,
};
use crate::diffcore::{GradientVector, GraphBuilder, Tensor};
use crate::error::{Error, Result};
use crate::flowlab::{
    convergence_study, integrate_flow, observed_orders, sgd_expectation_check, ConvergenceRow, ExpectationProblem,
    FlowProblem, Integrator, DEFAULT_ENUMERATION_CAP,
};
use crate::io::{load_checkpoint, read_checkpoint, sha256_hex, write_checkpoint};
use crate::masking::Mask;
use crate::netmodel::{build_cnn_scaled, build_mlp_scaled, make_blobs, Activation, CnnSpec, Dataset, Granularity, Network};
use crate::trainer::{prune_and_train, PruneMethod, RunLog, TrainConfig};
use crate::importance::Measure;

/// Environment variable holding the default output directory.
pub const OUT_ENV: &str = "FLOWPRUNE_OUT";

#[derive(Debug, Parser)]
#[command(name = "flowprune", version, about = "Gradient-flow pruning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prune-and-train one run per seed; writes run logs, masks and checkpoints.
    Train(RunArgs),
    /// Integrate gradient flow and report identity residuals and observed orders.
    Flowcheck(RunArgs),
    /// Final accuracy and loss for every method × rounds × seed.
    Compare(RunArgs),
    /// Correlation and layer-wise studies over a finished `train` run.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Root directory for run directories.
    #[arg(long, env = OUT_ENV, default_value = "runs")]
    pub out: PathBuf,
    /// Override a config value by dotted path, e.g. `train.rounds=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Run directory written by `train`.
    pub run_dir: PathBuf,
    /// Which study to run.
    #[arg(value_enum, default_value_t = Experiment::All)]
    pub experiment: Experiment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Experiment {
    GraspVsLoss,
    Ebt,
    L2Distance,
    Layerwise,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub classes: usize,
    pub dims: usize,
    pub per_class: usize,
    pub spread: f64,
    /// Added to the run seed to seed the blob generator.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { classes: 4, dims: 8, per_class: 50, spread: 0.3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
        #[serde(default = "one")]
        init_scale: f64,
    },
    Cnn {
        /// `[channels, height, width]`; the product must equal `data.dims`.
        input: [usize; 3],
        channels: Vec<usize>,
        #[serde(default = "three")]
        kernel: usize,
        #[serde(default = "default_activation")]
        activation: Activation,
        #[serde(default = "one")]
        init_scale: f64,
    },
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn one() -> f64 {
    1.0
}

fn three() -> usize {
    3
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Mlp { hidden: vec![32, 32], activation: Activation::Tanh, init_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub methods: Vec<PruneMethod>,
    pub rounds: Vec<usize>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            methods: vec![Measure::Magnitude.into(), Measure::Loss.into(), Measure::Proposed.into()],
            rounds: vec![1, 5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowProblemConfig {
    /// `L = ½ θᵀAθ` with a symmetric `matrix`.
    Quadratic { matrix: Vec<Vec<f64>>, theta0: Vec<f64> },
    /// Full-batch cross-entropy of the configured model on the configured data.
    Network,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ExpectationConfig {
    pub batches: usize,
    pub rates: Vec<f64>,
}

impl Default for ExpectationConfig {
    fn default() -> Self {
        Self { batches: 4, rates: vec![1e-3, 5e-4] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct FlowChecks {
    pub bound_tolerance: f64,
    pub min_order_rk4: f64,
    pub min_order_euler: f64,
}

impl Default for FlowChecks {
    fn default() -> Self {
        Self { bound_tolerance: 1e-9, min_order_rk4: 1.8, min_order_euler: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub problem: FlowProblemConfig,
    /// Step sizes, each run to the same horizon.
    pub steps: Vec<f64>,
    pub horizon: f64,
    pub integrators: Vec<Integrator>,
    /// Exhaustive SGD expectation checks; network problems only.
    pub expectation: Option<ExpectationConfig>,
    pub checks: FlowChecks,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            problem: FlowProblemConfig::Network,
            steps: vec![1e-2, 5e-3, 2.5e-3],
            horizon: 0.5,
            integrators: vec![Integrator::Rk4, Integrator::Euler],
            expectation: None,
            checks: FlowChecks::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Temperature of the Hessian-gradient product in the GraSP correlation.
    pub temperature: f64,
    pub ebt_every: usize,
    pub ebt_ratio: f64,
    pub overlap_target: f64,
    pub granularities: Vec<Granularity>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            ebt_every: 1,
            ebt_ratio: crate::analysis::EBT_MASK_RATIO,
            overlap_target: 0.5,
            granularities: vec![Granularity::Structured, Granularity::Unstructured],
        }
    }
}

/// Everything a run needs; each subcommand reads the sections it uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub compare: CompareConfig,
    pub flow: FlowConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![0],
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            compare: CompareConfig::default(),
            flow: FlowConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.into(), message: message.into() }
}

impl ExperimentConfig {
    /// Parse with field-path errors, then check cross-field constraints.
    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            config_err(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        let d = &self.data;
        if d.classes < 2 || d.dims == 0 || d.per_class == 0 {
            return Err(config_err("data", "need ≥ 2 classes and positive dims and per_class"));
        }
        if !(d.spread >= 0.0 && d.spread.is_finite()) {
            return Err(config_err("data.spread", format!("must be nonnegative, got {}", d.spread)));
        }
        match &self.model {
            ModelConfig::Mlp { hidden, .. } if hidden.contains(&0) => {
                return Err(config_err("model.hidden", "widths must be positive"))
            }
            ModelConfig::Cnn { input, .. } if input.iter().product::<usize>() != d.dims => {
                return Err(config_err("model.input", format!("{input:?} does not hold {} features", d.dims)))
            }
            _ => {}
        }
        self.train.validate().map_err(|e| match e {
            Error::Config { path, message } => config_err(&format!("train.{path}"), message),
            other => other,
        })?;
        if self.compare.rounds.iter().any(|&r| r > self.train.lr_schedule[0].epochs) {
            return Err(config_err("compare.rounds", "rounds exceed the first-phase epochs"));
        }
        let f = &self.flow;
        if f.steps.is_empty() || f.steps.iter().any(|&h| !(h > 0.0 && h < f.horizon)) {
            return Err(config_err("flow.steps", "steps must be positive and below the horizon"));
        }
        if let FlowProblemConfig::Quadratic { matrix, theta0 } = &f.problem {
            let n = theta0.len();
            if n == 0 || matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
                return Err(config_err("flow.problem.matrix", format!("must be {n}×{n} to match theta0")));
            }
            if (0..n).any(|i| (0..i).any(|j| matrix[i][j] != matrix[j][i])) {
                return Err(config_err("flow.problem.matrix", "must be symmetric"));
            }
        }
        if let Some(e) = &f.expectation {
            if e.batches == 0 || e.batches > DEFAULT_ENUMERATION_CAP {
                return Err(config_err("flow.expectation.batches", format!("must lie in 1..={DEFAULT_ENUMERATION_CAP}")));
            }
        }
        let a = &self.analysis;
        if !(a.temperature > 0.0) {
            return Err(config_err("analysis.temperature", "must be positive"));
        }
        if !(a.ebt_ratio > 0.0 && a.ebt_ratio < 1.0) {
            return Err(config_err("analysis.ebt_ratio", "must lie in (0,1)"));
        }
        if !(a.overlap_target > 0.0 && a.overlap_target < 1.0) {
            return Err(config_err("analysis.overlap_target", "must lie in (0,1)"));
        }
        Ok(())
    }

    /// Short content hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&bytes)[..16].to_string()
    }

    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        let d = &self.data;
        make_blobs(d.classes, d.dims, d.per_class, d.spread, d.seed.wrapping_add(seed))
    }

    pub fn network(&self, seed: u64) -> Result<Network> {
        let d = &self.data;
        match &self.model {
            ModelConfig::Mlp { hidden, activation, init_scale } => {
                let mut widths = vec![d.dims];
                widths.extend(hidden);
                widths.push(d.classes);
                build_mlp_scaled(&widths, *activation, seed, *init_scale)
            }
            ModelConfig::Cnn { input, channels, kernel, activation, init_scale } => {
                let spec =
                    CnnSpec { input: *input, channels: channels.clone(), kernel: *kernel, classes: d.classes, activation: *activation };
                build_cnn_scaled(&spec, seed, *init_scale)
            }
        }
    }

    /// Training config of one seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }
}

/// Set `key` (dotted path, numeric segments index arrays) to `raw`, parsed as
/// JSON when possible and as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(assignment, "override must look like key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        cur = match cur {
            Value::Array(items) => {
                let idx: usize = seg.parse().map_err(|_| config_err(key, format!("`{seg}` is not an array index")))?;
                items.get_mut(idx).ok_or_else(|| config_err(key, format!("index {idx} out of range")))?
            }
            Value::Object(map) => {
                if !last && !map.contains_key(*seg) {
                    map.insert(seg.to_string(), Value::Object(Default::default()));
                }
                map.entry(seg.to_string()).or_insert(Value::Null)
            }
            _ => return Err(config_err(key, format!("`{seg}` does not name a field"))),
        };
    }
    *cur = value;
    Ok(())
}

/// JSON Schema of [`ExperimentConfig`], as published in `configs/schema.json`.
pub fn config_schema() -> Value {
    schemars::schema_for!(ExperimentConfig).to_value()
}

/// Read, override and validate a config file.
pub fn load_config(path: &Path, seed: Option<u64>, sets: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| config_err("", e.to_string()))?;
    if !value.is_object() {
        return Err(config_err("", "config must be a JSON object"));
    }
    for s in sets {
        apply_override(&mut value, s)?;
    }
    if let Some(s) = seed {
        value["seeds"] = serde_json::json!([s]);
    }
    ExperimentConfig::from_value(value)
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Artifact path relative to the run directory → sha256.
    pub artifacts: BTreeMap<String, String>,
    pub timings_ms: BTreeMap<String, f64>,
}

/// Append-only writer for one run directory.
pub struct RunDir {
    dir: PathBuf,
    manifest: ExperimentManifest,
    started: Instant,
}

impl RunDir {
    pub fn open(dir: PathBuf, command: &str, config_hash: String, seeds: Vec<u64>) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        let manifest =
            ExperimentManifest { command: command.into(), config_hash, seeds, artifacts: BTreeMap::new(), timings_ms: BTreeMap::new() };
        Ok(Self { dir, manifest, started: Instant::now() })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Write `bytes` to `name`, or confirm an existing file is identical.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if path.exists() {
            if fs::read(&path)? != bytes {
                return Err(Error::ArtifactConflict(path));
            }
        } else {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            let tmp = path.with_extension("partial");
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &path)?;
        }
        self.manifest.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn time(&mut self, label: &str, since: Instant) {
        self.manifest.timings_ms.insert(label.to_string(), since.elapsed().as_secs_f64() * 1e3);
    }

    /// Append the manifest line and return it.
    pub fn finish(mut self) -> Result<RunOutcome> {
        self.time("total", self.started);
        let mut line = serde_json::to_string(&self.manifest)?;
        line.push('\n');
        use std::io::Write;
        fs::OpenOptions::new().create(true).append(true).open(self.dir.join("manifest.jsonl"))?.write_all(line.as_bytes())?;
        Ok(RunOutcome { dir: self.dir, manifest: self.manifest })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: ExperimentManifest,
}

fn open_run(cfg: &ExperimentConfig, out: &Path, command: &str) -> Result<RunDir> {
    let hash = cfg.hash();
    let mut run = RunDir::open(out.join(format!("{command}-{hash}")), command, hash, cfg.seeds.clone())?;
    run.write("config.json", &serde_json::to_vec_pretty(cfg)?)?;
    Ok(run)
}

fn checkpoint_bytes(network: &Network) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(network, &mut buf)?;
    Ok(buf)
}

fn history_network(template: &Network, params: &GradientVector) -> Result<Network> {
    let mut n = template.clone();
    n.set_params(params.clone())?;
    Ok(n)
}

fn rounds_csv(log: &RunLog, out: &mut Vec<u8>) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["round", "epoch", "target", "pruned_groups", "shortfall", "floored_layers"])?;
    for r in &log.rounds {
        let floored: Vec<String> = r.floored_layers.iter().map(|l| l.to_string()).collect();
        wr.write_record([
            r.round.to_string(),
            r.epoch.to_string(),
            r.target.to_string(),
            r.pruned_groups.to_string(),
            r.shortfall.to_string(),
            floored.join(" "),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Prune-and-train every seed; artifacts go under `seed-<s>/`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    let mut run = open_run(cfg, out, "train")?;
    for &seed in &cfg.seeds {
        let t = Instant::now();
        let data = cfg.dataset(seed)?;
        let mut net = cfg.network(seed)?;
        let log = prune_and_train(&mut net, &data, &cfg.train_config(seed))?;
        let dir = format!("seed-{seed}");
        run.write_with(&format!("{dir}/runlog.csv"), |b| log.write_csv(b))?;
        run.write_with(&format!("{dir}/sigma.csv"), |b| log.write_sigma_csv(b))?;
        run.write_with(&format!("{dir}/rounds.csv"), |b| rounds_csv(&log, b))?;
        run.write_with(&format!("{dir}/mask.csv"), |b| log.final_mask.write_csv(b))?;
        run.write_with(&format!("{dir}/mask.bin"), |b| log.final_mask.write_bitset(b))?;
        run.write(&format!("{dir}/model.ckpt"), &checkpoint_bytes(&net)?)?;
        for (k, p) in log.history.iter().enumerate() {
            run.write(&format!("{dir}/history/epoch-{k:04}.ckpt"), &checkpoint_bytes(&history_network(&net, p)?)?)?;
        }
        run.time(&format!("seed-{seed}"), t);
    }
    run.finish()
}

fn quadratic_problem(matrix: &[Vec<f64>], theta0: &[f64]) -> Result<FlowProblem> {
    let n = theta0.len();
    let mut b = GraphBuilder::new(vec![vec![n]]);
    let p = b.param(0)?;
    let row = b.reshape(p, &[1, n])?;
    let a = b.constant(Tensor::new(vec![n, n], matrix.concat())?);
    let ap = b.matmul(row, a)?;
    let ap = b.reshape(ap, &[n])?;
    let quad = b.mul(p, ap)?;
    let s = b.sum(quad);
    let out = b.scale(s, 0.5);
    FlowProblem::single_layer(b.finish(out), GradientVector::new(vec![Tensor::from_vec(theta0.to_vec())]))
}

fn flow_problem(cfg: &ExperimentConfig, seed: u64) -> Result<FlowProblem> {
    match &cfg.flow.problem {
        FlowProblemConfig::Quadratic { matrix, theta0 } => quadratic_problem(matrix, theta0),
        FlowProblemConfig::Network => FlowProblem::from_network(&cfg.network(seed)?, &cfg.dataset(seed)?, 1.0),
    }
}

#[derive(Clone, Debug, Serialize)]
struct ResidualRow {
    seed: u64,
    integrator: Integrator,
    step: f64,
    first: f64,
    second: f64,
    loss_rate: f64,
    bound_margin: f64,
}

#[derive(Clone, Debug, Serialize)]
struct OrderRow {
    seed: u64,
    integrator: Integrator,
    identity: &'static str,
    step_from: f64,
    step_to: f64,
    order: f64,
}

fn order_rows(seed: u64, integrator: Integrator, rows: &[ConvergenceRow]) -> Vec<OrderRow> {
    let mut out = Vec::new();
    for (identity, pick) in [("first", 0usize), ("second", 1), ("loss_rate", 2)] {
        let r: Vec<f64> = rows.iter().map(|c| [c.first, c.second, c.loss_rate][pick]).collect();
        for (w, order) in rows.windows(2).zip(observed_orders(&r)) {
            out.push(OrderRow { seed, integrator, identity, step_from: w[0].step, step_to: w[1].step, order });
        }
    }
    out
}

fn csv_rows<T: Serialize>(rows: &[T], out: &mut Vec<u8>) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Residual summary of a flowcheck run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    /// Smallest loss-bound margin over RK4 traces. Euler traces follow the
    /// flow only to first order and can undershoot the bound by O(h).
    pub min_bound_margin: Option<f64>,
    /// Smallest observed order of the first and second identities, per integrator.
    pub min_orders: BTreeMap<String, f64>,
    pub failures: Vec<String>,
}

/// Flow traces, identity residuals and observed orders for every seed and integrator.
pub fn cmd_flowcheck(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    let mut run = open_run(cfg, out, "flowcheck")?;
    let seeds: Vec<u64> = match cfg.flow.problem {
        FlowProblemConfig::Quadratic { .. } => vec![cfg.seeds[0]],
        FlowProblemConfig::Network => cfg.seeds.clone(),
    };
    let (mut residuals, mut orders, mut expectations) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in &seeds {
        let t = Instant::now();
        let problem = flow_problem(cfg, seed)?;
        for &integ in &cfg.flow.integrators {
            let rows = convergence_study(&problem, &cfg.flow.steps, cfg.flow.horizon, integ)?;
            let h = cfg.flow.steps[0];
            let trace = integrate_flow(&problem, h, (cfg.flow.horizon / h).round() as usize, integ)?;
            run.write_with(&format!("traces/seed-{seed}-{}.csv", integ.name()), |b| trace.write_csv(b))?;
            orders.extend(order_rows(seed, integ, &rows));
            residuals.extend(rows.into_iter().map(|c| ResidualRow {
                seed,
                integrator: integ,
                step: c.step,
                first: c.first,
                second: c.second,
                loss_rate: c.loss_rate,
                bound_margin: c.bound_margin,
            }));
        }
        if let (Some(e), FlowProblemConfig::Network) = (&cfg.flow.expectation, &cfg.flow.problem) {
            let exp = ExpectationProblem::from_network(&cfg.network(seed)?, &cfg.dataset(seed)?, e.batches)?;
            for order in [1u8, 2] {
                for &rate in &e.rates {
                    let r = sgd_expectation_check(&exp, rate, order, DEFAULT_ENUMERATION_CAP)?;
                    expectations.push((seed, r));
                }
            }
        }
        run.time(&format!("seed-{seed}"), t);
    }
    run.write_with("residuals.csv", |b| csv_rows(&residuals, b))?;
    run.write_with("orders.csv", |b| csv_rows(&orders, b))?;
    if !expectations.is_empty() {
        #[derive(Serialize)]
        struct Row {
            seed: u64,
            order: u8,
            rate: f64,
            expectation: f64,
            flow_value: f64,
            residual: f64,
        }
        let rows: Vec<Row> = expectations
            .iter()
            .map(|(seed, r)| Row {
                seed: *seed,
                order: r.order,
                rate: r.rate,
                expectation: r.expectation,
                flow_value: r.flow_value,
                residual: r.residual,
            })
            .collect();
        run.write_with("expectation.csv", |b| csv_rows(&rows, b))?;
    }

    let checks = &cfg.flow.checks;
    let mut summary = FlowSummary {
        min_bound_margin: residuals
            .iter()
            .filter(|r| r.integrator == Integrator::Rk4)
            .map(|r| r.bound_margin)
            .reduce(f64::min),
        min_orders: BTreeMap::new(),
        failures: Vec::new(),
    };
    for o in orders.iter().filter(|o| o.identity != "loss_rate") {
        let e = summary.min_orders.entry(o.integrator.name().to_string()).or_insert(f64::INFINITY);
        *e = e.min(o.order);
    }
    if let Some(m) = summary.min_bound_margin.filter(|&m| m < -checks.bound_tolerance) {
        summary.failures.push(format!("loss bound margin {m} below −{}", checks.bound_tolerance));
    }
    for (name, &order) in &summary.min_orders {
        let want = if name == "rk4" { checks.min_order_rk4 } else { checks.min_order_euler };
        if order < want {
            summary.failures.push(format!("{name} observed order {order} below {want}"));
        }
    }
    run.write("summary.json", &serde_json::to_vec_pretty(&summary)?)?;
    let failures = summary.failures.clone();
    let outcome = run.finish()?;
    if !failures.is_empty() {
        return Err(Error::CheckFailed(failures.join("; ")));
    }
    Ok(outcome)
}

/// One finished run of the comparison grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub rounds: usize,
    pub seed: u64,
    pub final_train_loss: f64,
    pub final_eval_acc: f64,
    pub group_fraction: f64,
    pub param_fraction: f64,
    pub steps: u64,
}

/// Run every method × rounds × seed on worker threads.
pub fn compare_rows(cfg: &ExperimentConfig) -> Result<Vec<CompareRow>> {
    let mut jobs = Vec::new();
    for &method in &cfg.compare.methods {
        for &rounds in &cfg.compare.rounds {
            for &seed in &cfg.seeds {
                jobs.push((method, rounds, seed));
            }
        }
    }
    jobs.par_iter()
        .map(|&(method, rounds, seed)| {
            let data = cfg.dataset(seed)?;
            let mut net = cfg.network(seed)?;
            let tc = TrainConfig { measure: method, rounds, ..cfg.train_config(seed) };
            let log = prune_and_train(&mut net, &data, &tc)?;
            Ok(CompareRow {
                method: method.name().to_string(),
                rounds,
                seed,
                final_train_loss: log.final_train_loss(),
                final_eval_acc: log.final_eval_acc(),
                group_fraction: log.final_mask.group_fraction(),
                param_fraction: log.final_mask.param_fraction(),
                steps: log.steps,
            })
        })
        .collect()
}

/// Per-run CSV plus a method × rounds table of seed means.
pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    let mut run = open_run(cfg, out, "compare")?;
    let t = Instant::now();
    let rows = compare_rows(cfg)?;
    run.time("runs", t);
    run.write_with("compare.csv", |b| csv_rows(&rows, b))?;
    #[derive(Serialize)]
    struct TableRow<'a> {
        method: &'a str,
        rounds: usize,
        seeds: usize,
        mean_eval_acc: f64,
        mean_train_loss: f64,
    }
    let mut table = Vec::new();
    for &method in &cfg.compare.methods {
        for &rounds in &cfg.compare.rounds {
            let sel: Vec<&CompareRow> = rows.iter().filter(|r| r.method == method.name() && r.rounds == rounds).collect();
            let n = sel.len() as f64;
            table.push(TableRow {
                method: method.name(),
                rounds,
                seeds: sel.len(),
                mean_eval_acc: sel.iter().map(|r| r.final_eval_acc).sum::<f64>() / n,
                mean_train_loss: sel.iter().map(|r| r.final_train_loss).sum::<f64>() / n,
            });
        }
    }
    run.write_with("table.csv", |b| csv_rows(&table, b))?;
    run.finish()
}

fn load_history(seed_dir: &Path) -> Result<Vec<Network>> {
    let dir = seed_dir.join("history");
    if !dir.is_dir() {
        return Err(config_err("train.record_history", "the run has no per-epoch checkpoints; rerun with record_history"));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "ckpt"));
    files.sort();
    files.iter().map(|p| load_checkpoint(p)).collect()
}

/// Correlation and layer-wise studies over a `train` run directory.
pub fn cmd_analyze(run_dir: &Path, experiment: Experiment) -> Result<RunOutcome> {
    let cfg_bytes = fs::read(run_dir.join("config.json"))?;
    let cfg = ExperimentConfig::from_value(serde_json::from_slice(&cfg_bytes)?)?;
    let mut run = RunDir::open(run_dir.to_path_buf(), "analyze", cfg.hash(), cfg.seeds.clone())?;
    let want = |e: Experiment| experiment == Experiment::All || experiment == e;
    let a = &cfg.analysis;
    let mut summary: Vec<CorrelationResult> = Vec::new();
    for &seed in &cfg.seeds {
        let t = Instant::now();
        let seed_dir = run_dir.join(format!("seed-{seed}"));
        let history = load_history(&seed_dir)?;
        let template = history.last().ok_or_else(|| config_err("train", "empty history"))?.clone();
        let params: Vec<GradientVector> = history.iter().map(|n| n.params().clone()).collect();
        let data = cfg.dataset(seed)?;
        let (train, _) = data.split(1.0 - cfg.train.eval_fraction, seed)?;
        let dir = format!("analysis/seed-{seed}");

        if want(Experiment::GraspVsLoss) {
            let last = history.len() - 1;
            for &k in &[0, last / 2, last] {
                for &gran in &a.granularities {
                    let (c, scatter) = grasp_vs_loss_correlation(&history[k], &train, a.temperature, gran, k as u64)?;
                    run.write_with(&format!("{dir}/grasp_vs_loss-{}-epoch-{k:04}.csv", granularity_name(gran)), |b| {
                        scatter.write_csv(b)
                    })?;
                    summary.push(c);
                }
            }
        }
        if want(Experiment::Ebt) {
            let sigmas: Vec<Vec<Vec<f64>>> = history.iter().map(|n| n.sigmas()).collect();
            let trace = ebt_correlation_trace(&template, &params, &sigmas, &train, a.ebt_every, a.ebt_ratio)?;
            run.write_with(&format!("{dir}/ebt.csv"), |b| trace.write_csv(b))?;
            summary.extend(trace.points.iter().map(|p| p.correlation.clone()));
        }
        if want(Experiment::L2Distance) {
            let trace = l2_vs_distance_trace(&template, &params, Granularity::Structured, a.overlap_target)?;
            #[derive(Serialize)]
            struct Row {
                epoch: u64,
                pearson: Option<f64>,
                spearman: Option<f64>,
                overlap: f64,
            }
            let rows: Vec<Row> = trace
                .iter()
                .map(|d| Row {
                    epoch: d.correlation.step,
                    pearson: d.correlation.pearson,
                    spearman: d.correlation.spearman,
                    overlap: d.overlap,
                })
                .collect();
            run.write_with(&format!("{dir}/l2_distance.csv"), |b| csv_rows(&rows, b))?;
            summary.extend(trace.into_iter().map(|d| d.correlation));
        }
        if want(Experiment::Layerwise) {
            let mask = Mask::read_bitset(fs::File::open(seed_dir.join("mask.bin"))?)?;
            run.write_with(&format!("{dir}/layerwise_ratios.csv"), |b| LayerwiseReport::ratios(&mask).write_csv(b))?;
            let grad = LayerwiseReport::gradnorm(&template, &params, &train)?;
            run.write_with(&format!("{dir}/layerwise_gradnorm.csv"), |b| grad.write_csv(b))?;
        }
        run.time(&format!("seed-{seed}"), t);
    }
    let name = match experiment {
        Experiment::GraspVsLoss => "grasp_vs_loss",
        Experiment::Ebt => "ebt",
        Experiment::L2Distance => "l2_distance",
        Experiment::Layerwise => "layerwise",
        Experiment::All => "all",
    };
    if !summary.is_empty() {
        run.write_with(&format!("analysis/correlations-{name}.csv"), |b| write_summary_csv(&summary, b))?;
    }
    run.finish()
}

fn granularity_name(g: Granularity) -> &'static str {
    match g {
        Granularity::Structured => "structured",
        Granularity::Unstructured => "unstructured",
    }
}

/// Read back a checkpoint written by `train`.
pub fn read_model(bytes: &[u8]) -> Result<Network> {
    read_checkpoint(bytes)
}

/// Dispatch a parsed command line.
pub fn run(cli: Cli) -> Result<RunOutcome> {
    match cli.command {
        Command::Train(a) => cmd_train(&load_config(&a.config, a.seed, &a.set)?, &a.out),
        Command::Flowcheck(a) => cmd_flowcheck(&load_config(&a.config, a.seed, &a.set)?, &a.out),
        Command::Compare(a) => cmd_compare(&load_config(&a.config, a.seed, &a.set)?, &a.out),
        Command::Analyze(a) => cmd_analyze(&a.run_dir, a.experiment),
    }
}
