//! Dense feed-forward networks with ReLU hidden layers and a softmax
//! cross-entropy head.
//!
//! Parameters are kept in 64-bit floats, weights row-major as
//! `fan_out x fan_in`. The forward pass never looks at a freezing mask: frozen
//! neurons still contribute to the output. Masks only decide which parameter
//! gradients survive. Sub-model execution (used by the dropout baselines) is
//! the one place where neurons are removed from the computation.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masking::{NeuronMask, ParamMask};
use crate::rng::{self, Purpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),
    #[error("learning rate must be finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Layer widths from input to output. Hidden layers use ReLU, the output layer
/// feeds a softmax.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Architecture {
    widths: Vec<usize>,
}

impl Architecture {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(NnError::InvalidArchitecture(format!(
                "need input, at least one hidden and an output layer, got {} layers",
                widths.len()
            )));
        }
        if let Some(pos) = widths.iter().position(|&w| w == 0) {
            return Err(NnError::InvalidArchitecture(format!(
                "layer {pos} has width 0"
            )));
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Number of neuron layers, input and output included.
    pub fn neuron_layers(&self) -> usize {
        self.widths.len()
    }

    /// Number of weight layers.
    pub fn weight_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn is_hidden(&self, layer: usize) -> bool {
        layer > 0 && layer + 1 < self.widths.len()
    }

    /// `(fan_in, fan_out)` of weight layer `l`, `l` counted from 1.
    pub fn fans(&self, l: usize) -> (usize, usize) {
        (self.widths[l - 1], self.widths[l])
    }

    pub fn param_count(&self) -> usize {
        (1..self.neuron_layers())
            .map(|l| {
                let (fan_in, fan_out) = self.fans(l);
                fan_out * fan_in + fan_out
            })
            .sum()
    }
}

impl TryFrom<Vec<usize>> for Architecture {
    type Error = NnError;

    fn try_from(widths: Vec<usize>) -> Result<Self> {
        Architecture::new(widths)
    }
}

impl From<Architecture> for Vec<usize> {
    fn from(arch: Architecture) -> Self {
        arch.widths
    }
}

/// Weights and biases of one dense layer. Also used as the storage for
/// gradients, which share the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `fan_out x fan_in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    #[inline]
    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.fan_in + inp]
    }

    #[inline]
    pub fn weight_mut(&mut self, out: usize, inp: usize) -> &mut f64 {
        &mut self.weights[out * self.fan_in + inp]
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

fn layers_for(arch: &Architecture) -> Vec<LayerParams> {
    (1..arch.neuron_layers())
        .map(|l| {
            let (fan_in, fan_out) = arch.fans(l);
            LayerParams::zeros(fan_in, fan_out)
        })
        .collect()
}

/// A dense network. `layers[l - 1]` maps neuron layer `l - 1` to layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    layers: Vec<LayerParams>,
}

impl Model {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            arch: arch.clone(),
            layers: layers_for(arch),
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    /// Parameter `l` is 1-based to match the neuron-layer numbering.
    pub fn layer(&self, l: usize) -> &LayerParams {
        &self.layers[l - 1]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerParams {
        &mut self.layers[l - 1]
    }

    /// All parameters in canonical order: per layer, weights row-major then
    /// biases.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(LayerParams::values)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(LayerParams::values_mut)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params().copied().collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.arch.param_count() {
            return Err(NnError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.arch.param_count(),
                values.len()
            )));
        }
        for (p, &v) in self.params_mut().zip(values) {
            *p = v;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|v| v.is_finite())
    }

    /// In-place SGD step. Entries whose gradient is zero are left untouched,
    /// which keeps frozen parameters bitwise identical (including signed zeros).
    pub fn sgd_step(&mut self, grad: &Gradient, eta: f64) -> Result<()> {
        if !eta.is_finite() {
            return Err(NnError::InvalidLearningRate(eta));
        }
        check_same_shape(&self.arch, grad.arch())?;
        for (layer, g) in self.layers.iter_mut().zip(&grad.layers) {
            for (w, &gw) in layer.values_mut().zip(g.values()) {
                if gw != 0.0 {
                    *w -= eta * gw;
                }
            }
        }
        Ok(())
    }
}

/// Gradient with the same layout as the model it was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    arch: Architecture,
    layers: Vec<LayerParams>,
}

impl Gradient {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            arch: arch.clone(),
            layers: layers_for(arch),
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerParams {
        &self.layers[l - 1]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerParams {
        &mut self.layers[l - 1]
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(LayerParams::values)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values().map(|g| g * g).sum()
    }

    pub fn dot(&self, other: &Gradient) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| a * b).sum()
    }

    /// Zero every entry outside `mask`.
    pub fn apply_mask(&mut self, mask: &ParamMask) -> Result<()> {
        check_same_shape(&self.arch, mask.arch())?;
        for (l, g) in self.layers.iter_mut().enumerate() {
            let m = mask.layer(l + 1);
            for (v, &on) in g.weights.iter_mut().zip(&m.weights) {
                if !on {
                    *v = 0.0;
                }
            }
            for (v, &on) in g.bias.iter_mut().zip(&m.bias) {
                if !on {
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }
}

fn check_same_shape(a: &Architecture, b: &Architecture) -> Result<()> {
    if a != b {
        return Err(NnError::ShapeMismatch(format!(
            "architecture {:?} vs {:?}",
            a.widths(),
            b.widths()
        )));
    }
    Ok(())
}

/// `n` samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    width: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(NnError::InvalidBatch("batch is empty".into()));
        }
        if width == 0 || inputs.len() != width * labels.len() {
            return Err(NnError::InvalidBatch(format!(
                "{} inputs do not form {} rows of width {width}",
                inputs.len(),
                labels.len()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(NnError::InvalidBatch("non-finite input".into()));
        }
        Ok(Self {
            width,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.width..(i + 1) * self.width]
    }

    /// Rows `idx` gathered into a new batch.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let mut inputs = Vec::with_capacity(idx.len() * self.width);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(inputs, self.width, labels)
    }
}

/// How a model is executed.
#[derive(Debug, Clone, Copy)]
pub enum Execution<'a> {
    /// Every neuron participates.
    Full,
    /// Neurons outside the mask are removed: their activations are zero and no
    /// error signal reaches them.
    SubModel(&'a NeuronMask),
}

/// Per-layer activations of a batch (row-major `n x width`), layer 0 being the
/// input and the last layer the softmax probabilities.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub activations: Vec<Vec<f64>>,
    pub loss: f64,
    pub accuracy: f64,
}

fn validate_inputs(model: &Model, batch: &Batch) -> Result<()> {
    if batch.width != model.arch.input_width() {
        return Err(NnError::ShapeMismatch(format!(
            "batch width {} vs input width {}",
            batch.width,
            model.arch.input_width()
        )));
    }
    let classes = model.arch.output_width();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= classes) {
        return Err(NnError::InvalidBatch(format!(
            "label {bad} outside {classes} classes"
        )));
    }
    Ok(())
}

fn run_forward(model: &Model, batch: &Batch, exec: Execution<'_>) -> Result<ForwardPass> {
    validate_inputs(model, batch)?;
    if let Execution::SubModel(mask) = exec {
        if mask.arch() != model.arch() {
            return Err(NnError::ShapeMismatch("neuron mask architecture".into()));
        }
    }
    let n = batch.len();
    let last = model.arch.weight_layers();
    let mut activations = Vec::with_capacity(last + 1);
    activations.push(batch.inputs.clone());
    for l in 1..=last {
        let layer = model.layer(l);
        let prev = &activations[l - 1];
        let mut out = vec![0.0; n * layer.fan_out];
        let keep = match exec {
            Execution::SubModel(mask) if l < last => Some(mask.layer(l)),
            _ => None,
        };
        for s in 0..n {
            let a = &prev[s * layer.fan_in..(s + 1) * layer.fan_in];
            let z = &mut out[s * layer.fan_out..(s + 1) * layer.fan_out];
            for (i, zi) in z.iter_mut().enumerate() {
                if keep.is_some_and(|k| !k[i]) {
                    continue;
                }
                let row = &layer.weights[i * layer.fan_in..(i + 1) * layer.fan_in];
                let mut acc = layer.bias[i];
                for (w, x) in row.iter().zip(a) {
                    acc += w * x;
                }
                *zi = if l < last { acc.max(0.0) } else { acc };
            }
        }
        activations.push(out);
    }

    // Softmax cross-entropy on the logits, in place.
    let classes = model.arch.output_width();
    let logits = activations.last_mut().unwrap();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in 0..n {
        let z = &mut logits[s * classes..(s + 1) * classes];
        let mut best = 0;
        for c in 1..classes {
            if z[c] > z[best] {
                best = c;
            }
        }
        let max = z[best];
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let y = batch.labels[s];
        loss += lse - z[y];
        if best == y {
            correct += 1;
        }
        for v in z.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(NnError::NumericalOverflow(format!(
            "loss evaluated to {loss}"
        )));
    }
    Ok(ForwardPass {
        activations,
        loss,
        accuracy: correct as f64 / n as f64,
    })
}

fn backward(model: &Model, batch: &Batch, pass: &ForwardPass) -> Gradient {
    let n = batch.len();
    let last = model.arch.weight_layers();
    let classes = model.arch.output_width();
    let mut grad = Gradient::zeros(&model.arch);

    // dL/dz at the output: (softmax - onehot) / n.
    let mut delta = pass.activations[last].clone();
    for s in 0..n {
        delta[s * classes + batch.labels[s]] -= 1.0;
    }
    let inv_n = 1.0 / n as f64;
    for d in delta.iter_mut() {
        *d *= inv_n;
    }

    for l in (1..=last).rev() {
        let layer = model.layer(l);
        let prev = &pass.activations[l - 1];
        let g = grad.layer_mut(l);
        for s in 0..n {
            let d = &delta[s * layer.fan_out..(s + 1) * layer.fan_out];
            let a = &prev[s * layer.fan_in..(s + 1) * layer.fan_in];
            for (i, &di) in d.iter().enumerate() {
                if di == 0.0 {
                    continue;
                }
                g.bias[i] += di;
                let row = &mut g.weights[i * layer.fan_in..(i + 1) * layer.fan_in];
                for (gw, &x) in row.iter_mut().zip(a) {
                    *gw += di * x;
                }
            }
        }
        if l == 1 {
            break;
        }
        // Propagate through the layer and the ReLU gate of layer l-1. Removed
        // neurons have zero activation, so the gate also stops their signal.
        let mut next = vec![0.0; n * layer.fan_in];
        for s in 0..n {
            let d = &delta[s * layer.fan_out..(s + 1) * layer.fan_out];
            let out = &mut next[s * layer.fan_in..(s + 1) * layer.fan_in];
            for (i, &di) in d.iter().enumerate() {
                if di == 0.0 {
                    continue;
                }
                let row = &layer.weights[i * layer.fan_in..(i + 1) * layer.fan_in];
                for (o, &w) in out.iter_mut().zip(row) {
                    *o += di * w;
                }
            }
            let a = &prev[s * layer.fan_in..(s + 1) * layer.fan_in];
            for (o, &x) in out.iter_mut().zip(a) {
                if x <= 0.0 {
                    *o = 0.0;
                }
            }
        }
        delta = next;
    }
    grad
}

/// He-normal weights (`sd = sqrt(2 / fan_in)`), zero biases.
pub fn init_model(arch: &Architecture, seed: u64) -> Model {
    let mut model = Model::zeros(arch);
    let mut stream = rng::stream(seed, Purpose::ModelInit, &[]);
    for layer in model.layers_mut() {
        let sd = (2.0 / layer.fan_in as f64).sqrt();
        let normal = Normal::new(0.0, sd).expect("positive standard deviation");
        for w in layer.weights.iter_mut() {
            *w = normal.sample(&mut stream);
        }
    }
    model
}

/// Full forward pass. Masks play no role here.
pub fn forward(model: &Model, batch: &Batch) -> Result<ForwardPass> {
    run_forward(model, batch, Execution::Full)
}

/// Forward pass under an execution mode, returning `(loss, accuracy)`.
pub fn evaluate(model: &Model, batch: &Batch, exec: Execution<'_>) -> Result<(f64, f64)> {
    let pass = run_forward(model, batch, exec)?;
    Ok((pass.loss, pass.accuracy))
}

/// Loss and unmasked gradient of the mean cross-entropy.
pub fn loss_grad(model: &Model, batch: &Batch) -> Result<(f64, Gradient)> {
    let pass = run_forward(model, batch, Execution::Full)?;
    let grad = backward(model, batch, &pass);
    Ok((pass.loss, grad))
}

/// Gradient restricted to the active parameters of `mask`. Backpropagation
/// runs through the whole network; only inactive entries are zeroed.
pub fn masked_loss_grad(model: &Model, batch: &Batch, mask: &ParamMask) -> Result<(f64, Gradient)> {
    check_same_shape(model.arch(), mask.arch())?;
    let (loss, mut grad) = loss_grad(model, batch)?;
    grad.apply_mask(mask)?;
    Ok((loss, grad))
}

/// Loss and gradient of the sub-model spanned by the active neurons of `mask`.
/// Entries outside the sub-model are exactly zero.
pub fn submodel_loss_grad(
    model: &Model,
    batch: &Batch,
    mask: &NeuronMask,
    params: &ParamMask,
) -> Result<(f64, Gradient)> {
    let pass = run_forward(model, batch, Execution::SubModel(mask))?;
    let mut grad = backward(model, batch, &pass);
    grad.apply_mask(params)?;
    Ok((pass.loss, grad))
}

/// `model - eta * grad`, leaving entries with zero gradient bitwise unchanged.
pub fn apply_sgd_step(model: &Model, grad: &Gradient, eta: f64) -> Result<Model> {
    let mut next = model.clone();
    next.sgd_step(grad, eta)?;
    Ok(next)
}
