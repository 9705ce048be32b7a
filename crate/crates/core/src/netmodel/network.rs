use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use schemars::JsonSchema;

use super::dataset::Dataset;
use crate::diffcore::{GradientVector, Graph, GraphBuilder, NodeId, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    /// Fan-in variance gain: 2 for ReLU, 1 otherwise.
    fn gain(self) -> f64 {
        match self {
            Activation::Relu => 2.0,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    /// Same-padded stride-1 convolution followed by optional `pool×pool` mean pooling.
    Conv { in_channels: usize, out_channels: usize, kernel: usize, pool: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub activation: Activation,
    /// Output heads are not pruned.
    pub prunable: bool,
}

impl Layer {
    /// Number of filters (output channels or output units).
    pub fn filters(&self) -> usize {
        match self.kind {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv { out_channels, .. } => out_channels,
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv { in_channels, kernel, .. } => in_channels * kernel * kernel,
        }
    }

    fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense { inputs, outputs } => vec![inputs, outputs],
            LayerKind::Conv { in_channels, out_channels, kernel, .. } => {
                vec![out_channels, in_channels, kernel, kernel]
            }
        }
    }
}

/// Role of a parameter tensor inside its layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Scale,
}

/// Whether prune groups are whole filters or single parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Structured,
    Unstructured,
}

/// A set of parameters pruned together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneGroup {
    pub layer: usize,
    pub group: usize,
    /// Flat indices into the network's parameter vector.
    pub indices: Vec<usize>,
    pub prunable: bool,
}

/// Sequential network of dense/convolutional layers.
///
/// Every layer owns three parameter tensors in this order: weight, bias and
/// per-filter scale `σ`. A layer computes `act(σ ⊙ (W x) + b)`. Parameters
/// are stored layer-major, which fixes the flattening order.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    classes: usize,
    params: GradientVector,
    init: GradientVector,
}

/// Shape and initialization options for [`build_cnn`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnSpec {
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub classes: usize,
    pub activation: Activation,
}

impl Network {
    /// Assemble a network from layers and explicit parameters; the current
    /// parameters become the initialization snapshot.
    pub fn from_parts(layers: Vec<Layer>, input_shape: Vec<usize>, params: GradientVector) -> Result<Self> {
        Self::with_init(layers, input_shape, params.clone(), params)
    }

    pub fn with_init(
        layers: Vec<Layer>,
        input_shape: Vec<usize>,
        params: GradientVector,
        init: GradientVector,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("network needs at least one layer"));
        }
        let expected: Vec<Vec<usize>> = layers
            .iter()
            .flat_map(|l| [l.weight_shape(), vec![l.filters()], vec![l.filters()]])
            .collect();
        if params.shapes() != expected || init.shapes() != expected {
            return Err(shape_err("parameters do not match layer definitions"));
        }
        let classes = layers.last().map(Layer::filters).unwrap_or(0);
        let net = Self { layers, input_shape, classes, params, init };
        net.output_spatial()?;
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_features(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &GradientVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut GradientVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: GradientVector) -> Result<()> {
        self.params.check_same_shape(&params)?;
        self.params = params;
        Ok(())
    }

    /// Parameters at initialization. Never modified by training.
    pub fn init_snapshot(&self) -> &GradientVector {
        &self.init
    }

    /// Replace the initialization snapshot with the current parameters.
    pub fn reset_init_snapshot(&mut self) {
        self.init = self.params.clone();
    }

    pub fn param_index(layer: usize, role: ParamRole) -> usize {
        3 * layer
            + match role {
                ParamRole::Weight => 0,
                ParamRole::Bias => 1,
                ParamRole::Scale => 2,
            }
    }

    /// Flat offset of every parameter tensor.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.params.tensors().len());
        let mut acc = 0;
        for t in self.params.tensors() {
            out.push(acc);
            acc += t.len();
        }
        out
    }

    /// Layer that owns each flat parameter index.
    pub fn layer_of_params(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.params.numel());
        for (i, t) in self.params.tensors().iter().enumerate() {
            out.extend(std::iter::repeat_n(i / 3, t.len()));
        }
        out
    }

    /// Per-filter scale parameters of one layer.
    pub fn sigma(&self, layer: usize) -> &[f64] {
        self.params.tensors()[Self::param_index(layer, ParamRole::Scale)].data()
    }

    /// All σ values, one vector per layer.
    pub fn sigmas(&self) -> Vec<Vec<f64>> {
        (0..self.layers.len()).map(|l| self.sigma(l).to_vec()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    fn output_spatial(&self) -> Result<()> {
        let mut shape = self.input_shape.clone();
        for l in &self.layers {
            match l.kind {
                LayerKind::Dense { inputs, .. } => {
                    if shape.iter().product::<usize>() != inputs {
                        return Err(shape_err(format!("layer {} expects {inputs} inputs, got {shape:?}", l.name)));
                    }
                    shape = vec![l.filters()];
                }
                LayerKind::Conv { in_channels, out_channels, pool, .. } => {
                    if shape.len() != 3 || shape[0] != in_channels {
                        return Err(shape_err(format!("layer {} expects {in_channels} channels, got {shape:?}", l.name)));
                    }
                    if pool == 0 || !shape[1].is_multiple_of(pool) || !shape[2].is_multiple_of(pool) {
                        return Err(shape_err(format!("layer {} pool {pool} on {shape:?}", l.name)));
                    }
                    shape = vec![out_channels, shape[1] / pool, shape[2] / pool];
                }
            }
        }
        Ok(())
    }

    /// Prune groups for every layer, including non-prunable heads.
    pub fn groups(&self, granularity: Granularity) -> Vec<PruneGroup> {
        let offsets = self.offsets();
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let w_off = offsets[Self::param_index(l, ParamRole::Weight)];
            let b_off = offsets[Self::param_index(l, ParamRole::Bias)];
            let s_off = offsets[Self::param_index(l, ParamRole::Scale)];
            match granularity {
                Granularity::Structured => {
                    for f in 0..layer.filters() {
                        let mut idx: Vec<usize> = match layer.kind {
                            LayerKind::Dense { inputs, outputs } => {
                                (0..inputs).map(|i| w_off + i * outputs + f).collect()
                            }
                            LayerKind::Conv { in_channels, kernel, .. } => {
                                let per = in_channels * kernel * kernel;
                                (w_off + f * per..w_off + (f + 1) * per).collect()
                            }
                        };
                        idx.push(b_off + f);
                        idx.push(s_off + f);
                        out.push(PruneGroup { layer: l, group: f, indices: idx, prunable: layer.prunable });
                    }
                }
                Granularity::Unstructured => {
                    let end = s_off + layer.filters();
                    for (g, i) in (w_off..end).enumerate() {
                        out.push(PruneGroup { layer: l, group: g, indices: vec![i], prunable: layer.prunable });
                    }
                }
            }
        }
        out
    }

    /// `Σ_{i∈group} (θᵢ − θᵢ(0))²`.
    pub fn distance_from_init(&self, group: &PruneGroup) -> Result<f64> {
        let n = self.params.numel();
        if group.layer >= self.layers.len() || group.indices.iter().any(|&i| i >= n) {
            return Err(Error::UnknownGroup { layer: group.layer, group: group.group });
        }
        let cur = self.params.flatten();
        let init = self.init.flatten();
        Ok(group.indices.iter().map(|&i| (cur[i] - init[i]).powi(2)).sum())
    }

    /// Look up group `(layer, group)` at the given granularity.
    pub fn group(&self, granularity: Granularity, layer: usize, group: usize) -> Result<PruneGroup> {
        self.groups(granularity)
            .into_iter()
            .find(|g| g.layer == layer && g.group == group)
            .ok_or(Error::UnknownGroup { layer, group })
    }

    fn logits_node(&self, b: &mut GraphBuilder, inputs: &Tensor) -> Result<NodeId> {
        let n = inputs.shape()[0];
        if inputs.shape().len() != 2 || inputs.shape()[1] != self.input_features() {
            return Err(shape_err(format!(
                "inputs {:?} vs network input {:?}",
                inputs.shape(),
                self.input_shape
            )));
        }
        let mut x = b.constant(inputs.clone());
        let mut spatial = self.input_shape.len() == 3;
        if spatial {
            let mut s = vec![n];
            s.extend_from_slice(&self.input_shape);
            x = b.reshape(x, &s)?;
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let w = b.param(Self::param_index(l, ParamRole::Weight))?;
            let bias = b.param(Self::param_index(l, ParamRole::Bias))?;
            let s = b.param(Self::param_index(l, ParamRole::Scale))?;
            let mut h = match layer.kind {
                LayerKind::Dense { inputs, .. } => {
                    if spatial {
                        x = b.reshape(x, &[n, inputs])?;
                        spatial = false;
                    }
                    b.matmul(x, w)?
                }
                LayerKind::Conv { .. } => b.conv2d(x, w)?,
            };
            h = b.mul_channel(h, s)?;
            h = b.add_channel(h, bias)?;
            h = match layer.activation {
                Activation::Tanh => b.tanh(h),
                Activation::Relu => b.relu(h),
                Activation::Identity => h,
            };
            if let LayerKind::Conv { pool, .. } = layer.kind {
                if pool > 1 {
                    h = b.mean_pool(h, pool)?;
                }
            }
            x = h;
        }
        Ok(x)
    }

    /// Graph from parameters to the mean temperature-scaled cross-entropy on `data`.
    pub fn loss_graph(&self, data: &Dataset, temperature: f64) -> Result<Graph> {
        if data.is_empty() {
            return Err(invalid("empty batch"));
        }
        let mut b = GraphBuilder::for_params(&self.params);
        let logits = self.logits_node(&mut b, data.inputs())?;
        let out = b.softmax_xent(logits, data.labels(), temperature)?;
        Ok(b.finish(out))
    }

    /// Graph from parameters to the `[n, classes]` logits.
    pub fn logits_graph(&self, inputs: &Tensor) -> Result<Graph> {
        let mut b = GraphBuilder::for_params(&self.params);
        let logits = self.logits_node(&mut b, inputs)?;
        Ok(b.finish(logits))
    }

    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        self.logits_graph(inputs)?.forward(&self.params)
    }

    pub fn loss(&self, data: &Dataset, temperature: f64) -> Result<f64> {
        self.loss_graph(data, temperature)?.evaluate(&self.params)
    }

    /// Fraction of rows whose argmax logit equals the label.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let logits = self.logits(data.inputs())?;
        let c = self.classes;
        let correct = data
            .labels()
            .iter()
            .enumerate()
            .filter(|(r, &y)| {
                let row = &logits.data()[r * c..(r + 1) * c];
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |bi, (j, &v)| if v > row[bi] { j } else { bi });
                best == y
            })
            .count();
        Ok(correct as f64 / data.len() as f64)
    }
}

/// Kaiming-style fan-in standard deviation: `scale · sqrt(gain / fan_in)`.
pub fn init_std(fan_in: usize, activation: Activation, scale: f64) -> f64 {
    scale * (activation.gain() / fan_in as f64).sqrt()
}

fn init_params(layers: &[Layer], seed: u64, scale: f64) -> Result<GradientVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::with_capacity(3 * layers.len());
    for layer in layers {
        let shape = layer.weight_shape();
        let n: usize = shape.iter().product();
        // the head's fan-in gain follows the activation feeding it
        let std = init_std(layer.fan_in(), layer.activation, scale);
        let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
        let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
        tensors.push(Tensor::new(shape, data)?);
        tensors.push(Tensor::zeros(&[layer.filters()]));
        tensors.push(Tensor::full(&[layer.filters()], 1.0));
    }
    Ok(GradientVector::new(tensors))
}

/// Fully connected network with `widths[0]` inputs and `widths.last()` classes.
///
/// Hidden layers use `activation`; the output layer is linear and not prunable.
pub fn build_mlp(widths: &[usize], activation: Activation, seed: u64) -> Result<Network> {
    build_mlp_scaled(widths, activation, seed, 1.0)
}

/// [`build_mlp`] with the initialization standard deviation multiplied by `init_scale`.
pub fn build_mlp_scaled(widths: &[usize], activation: Activation, seed: u64, init_scale: f64) -> Result<Network> {
    if widths.len() < 2 {
        return Err(invalid("an MLP needs at least input and output widths"));
    }
    if widths.contains(&0) {
        return Err(invalid("widths must be positive"));
    }
    let last = widths.len() - 2;
    let layers: Vec<Layer> = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| Layer {
            name: format!("dense{i}"),
            kind: LayerKind::Dense { inputs: w[0], outputs: w[1] },
            activation: if i == last { Activation::Identity } else { activation },
            prunable: i != last,
        })
        .collect();
    let params = init_params(&layers, seed, init_scale)?;
    Network::from_parts(layers, vec![widths[0]], params)
}

/// Convolutional network: conv layers per `spec.channels`, then a dense head.
///
/// Each conv layer is followed by 2×2 mean pooling while the spatial extent
/// is even and larger than 2.
pub fn build_cnn(spec: &CnnSpec, seed: u64) -> Result<Network> {
    build_cnn_scaled(spec, seed, 1.0)
}

pub fn build_cnn_scaled(spec: &CnnSpec, seed: u64, init_scale: f64) -> Result<Network> {
    if spec.channels.is_empty() || spec.channels.contains(&0) || spec.input.contains(&0) {
        return Err(invalid("channel plan and input extents must be positive"));
    }
    if spec.kernel.is_multiple_of(2) {
        return Err(invalid("kernel size must be odd for same padding"));
    }
    if spec.classes < 2 {
        return Err(invalid("need at least 2 classes"));
    }
    let [c0, mut h, mut w] = spec.input;
    let mut layers = Vec::new();
    let mut cin = c0;
    for (i, &cout) in spec.channels.iter().enumerate() {
        let pool = if h % 2 == 0 && w % 2 == 0 && h > 2 && w > 2 { 2 } else { 1 };
        layers.push(Layer {
            name: format!("conv{i}"),
            kind: LayerKind::Conv { in_channels: cin, out_channels: cout, kernel: spec.kernel, pool },
            activation: spec.activation,
            prunable: true,
        });
        h /= pool;
        w /= pool;
        cin = cout;
    }
    layers.push(Layer {
        name: "head".into(),
        kind: LayerKind::Dense { inputs: cin * h * w, outputs: spec.classes },
        activation: Activation::Identity,
        prunable: false,
    });
    let params = init_params(&layers, seed, init_scale)?;
    Network::from_parts(layers, spec.input.to_vec(), params)
}
