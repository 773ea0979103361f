//! Dense ReLU network with softmax cross-entropy loss and mini-batch SGD.
//!
//! Parameters are kept in one flat vector. Layer `l` occupies an `out × in`
//! row-major weight block followed by its `out` biases, in layer order.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{DeviceDataset, Sample};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Loss {
    #[default]
    SoftmaxCrossEntropy,
}

/// Network shape: `[input_dim, hidden..., class_count]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    layer_dims: Vec<usize>,
    activation: Activation,
    loss: Loss,
}

/// Position of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl ModelSpec {
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::config(format!(
                "model needs at least an input and an output layer, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::config(format!(
                "layer dimensions must be positive, got {layer_dims:?}"
            )));
        }
        Ok(Self {
            layer_dims,
            activation: Activation::Relu,
            loss: Loss::SoftmaxCrossEntropy,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn loss(&self) -> Loss {
        self.loss
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn layers(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let slot = LayerSlot {
                    fan_in,
                    fan_out,
                    weight_offset: offset,
                    bias_offset: offset + fan_in * fan_out,
                };
                offset += fan_in * fan_out + fan_out;
                slot
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric(format!(
            "{what} has non-finite entry at {i}"
        ))),
        None => Ok(()),
    }
}

/// A full set of model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    params: Vec<f64>,
    spec: ModelSpec,
}

impl ModelWeights {
    pub fn from_params(spec: ModelSpec, params: Vec<f64>) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::contract(format!(
                "parameter vector has length {}, model {:?} needs {}",
                params.len(),
                spec.layer_dims(),
                spec.param_count()
            )));
        }
        check_finite(&params, "model weights")?;
        Ok(Self { params, spec })
    }

    pub fn zeros(spec: ModelSpec) -> Self {
        Self {
            params: vec![0.0; spec.param_count()],
            spec,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    /// `self + delta`.
    pub fn apply(&self, delta: &WeightDelta) -> Result<ModelWeights> {
        if delta.spec != self.spec {
            return Err(Error::contract("delta shape does not match weights"));
        }
        let params = self
            .params
            .iter()
            .zip(&delta.delta)
            .map(|(w, d)| w + d)
            .collect();
        ModelWeights::from_params(self.spec.clone(), params)
    }
}

/// Difference between trained local weights and the dispatched global weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDelta {
    delta: Vec<f64>,
    spec: ModelSpec,
}

impl WeightDelta {
    pub fn new(spec: ModelSpec, delta: Vec<f64>) -> Result<Self> {
        if delta.len() != spec.param_count() {
            return Err(Error::contract(format!(
                "delta has length {}, model needs {}",
                delta.len(),
                spec.param_count()
            )));
        }
        check_finite(&delta, "weight delta")?;
        Ok(Self { delta, spec })
    }

    /// `trained − base`.
    pub fn between(trained: &ModelWeights, base: &ModelWeights) -> Result<Self> {
        if trained.spec != base.spec {
            return Err(Error::contract("cannot diff weights of different models"));
        }
        let delta = trained
            .params
            .iter()
            .zip(&base.params)
            .map(|(t, b)| t - b)
            .collect();
        WeightDelta::new(trained.spec.clone(), delta)
    }

    pub fn values(&self) -> &[f64] {
        &self.delta
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Size on the wire, as 8-byte reals.
    pub fn byte_size(&self) -> u64 {
        self.delta.len() as u64 * 8
    }
}

/// A row-major block of inputs with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    input_dim: usize,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, input_dim: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::contract("batch must hold at least one sample"));
        }
        if input_dim == 0 || inputs.len() != input_dim * labels.len() {
            return Err(Error::contract(format!(
                "batch inputs have {} values, expected {} x {}",
                inputs.len(),
                labels.len(),
                input_dim
            )));
        }
        Ok(Self {
            inputs,
            input_dim,
            labels,
        })
    }

    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut input_dim = None;
        for s in samples {
            let dim = *input_dim.get_or_insert(s.input.len());
            if s.input.len() != dim {
                return Err(Error::contract("samples in a batch differ in dimension"));
            }
            inputs.extend_from_slice(&s.input);
            labels.push(s.label);
        }
        Batch::new(inputs, input_dim.unwrap_or(0), labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

/// Draw initial weights: `U(−1/√fan_in, 1/√fan_in)` per layer, zero biases.
pub fn init_weights(spec: &ModelSpec, seed: u64) -> ModelWeights {
    let mut rng = rng::stream(seed);
    let mut params = vec![0.0; spec.param_count()];
    for layer in spec.layers() {
        let bound = 1.0 / (layer.fan_in as f64).sqrt();
        for p in &mut params[layer.weight_offset..layer.bias_offset] {
            *p = rng.random_range(-bound..bound);
        }
    }
    ModelWeights {
        params,
        spec: spec.clone(),
    }
}

fn check_batch(spec: &ModelSpec, batch: &Batch) -> Result<()> {
    if batch.input_dim != spec.input_dim() {
        return Err(Error::contract(format!(
            "batch input dimension {} does not match model input dimension {}",
            batch.input_dim,
            spec.input_dim()
        )));
    }
    let classes = spec.class_count();
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-sample forward activations, kept for backprop.
struct Trace {
    /// `acts[0]` is the input; `acts[l + 1]` is the post-activation output of layer `l`
    /// (the last entry holds raw logits).
    acts: Vec<Vec<f64>>,
}

fn forward(params: &[f64], layers: &[LayerSlot], x: &[f64]) -> Trace {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x.to_vec());
    for (l, layer) in layers.iter().enumerate() {
        let input = &acts[l];
        let w = &params[layer.weight_offset..layer.bias_offset];
        let b = &params[layer.bias_offset..layer.bias_offset + layer.fan_out];
        let hidden = l + 1 < layers.len();
        let out: Vec<f64> = (0..layer.fan_out)
            .map(|o| {
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                let z = b[o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>();
                if hidden {
                    z.max(0.0)
                } else {
                    z
                }
            })
            .collect();
        acts.push(out);
    }
    Trace { acts }
}

/// Returns `(loss, softmax probabilities)` for one logit vector.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    (loss.max(0.0), exps.into_iter().map(|e| e / sum).collect())
}

/// Mean loss and gradient over the batch, in one pass.
fn loss_and_grad(w: &ModelWeights, batch: &Batch, want_grad: bool) -> (f64, usize, Vec<f64>) {
    let layers = w.spec.layers();
    let mut grad = if want_grad {
        vec![0.0; w.params.len()]
    } else {
        Vec::new()
    };
    let mut total_loss = 0.0;
    let mut correct = 0;
    for i in 0..batch.len() {
        let label = batch.labels[i];
        let trace = forward(&w.params, &layers, batch.row(i));
        let logits = trace.acts.last().unwrap();
        if argmax(logits) == label {
            correct += 1;
        }
        let (loss, probs) = softmax_xent(logits, label);
        total_loss += loss;
        if !want_grad {
            continue;
        }
        // dL/dz at the output layer.
        let mut upstream = probs;
        upstream[label] -= 1.0;
        for (l, layer) in layers.iter().enumerate().rev() {
            let input = &trace.acts[l];
            for o in 0..layer.fan_out {
                let g = upstream[o];
                if g == 0.0 {
                    continue;
                }
                let row = layer.weight_offset + o * layer.fan_in;
                for (gw, x) in grad[row..row + layer.fan_in].iter_mut().zip(input) {
                    *gw += g * x;
                }
                grad[layer.bias_offset + o] += g;
            }
            if l == 0 {
                break;
            }
            let mut next = vec![0.0; layer.fan_in];
            for (o, &g) in upstream.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = layer.weight_offset + o * layer.fan_in;
                for (n, wv) in next.iter_mut().zip(&w.params[row..row + layer.fan_in]) {
                    *n += g * wv;
                }
            }
            // ReLU derivative, taking 0 at the kink.
            for (n, a) in next.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *n = 0.0;
                }
            }
            upstream = next;
        }
    }
    let n = batch.len() as f64;
    for g in &mut grad {
        *g /= n;
    }
    (total_loss / n, correct, grad)
}

/// Mean softmax cross-entropy and top-1 accuracy over the batch.
pub fn forward_loss(w: &ModelWeights, batch: &Batch) -> Result<(f64, f64)> {
    check_batch(&w.spec, batch)?;
    let (loss, correct, _) = loss_and_grad(w, batch, false);
    Ok((loss, correct as f64 / batch.len() as f64))
}

/// Exact gradient of the mean batch loss with respect to the flat parameters.
pub fn gradient(w: &ModelWeights, batch: &Batch) -> Result<Vec<f64>> {
    check_batch(&w.spec, batch)?;
    Ok(loss_and_grad(w, batch, true).2)
}

/// Loss and accuracy over a sample set, evaluated in fixed-size chunks.
pub fn evaluate(w: &ModelWeights, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty sample set"));
    }
    const CHUNK: usize = 512;
    let mut loss = 0.0;
    let mut correct = 0;
    for chunk in samples.chunks(CHUNK) {
        let batch = Batch::from_samples(chunk)?;
        check_batch(&w.spec, &batch)?;
        let (l, c, _) = loss_and_grad(w, &batch, false);
        loss += l * chunk.len() as f64;
        correct += c;
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Local SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!(
                "learning rate {} is invalid",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }
}

/// Train a copy of `global` on one device and return the weight difference.
///
/// Each epoch shuffles the device data with `rng` and walks it in chunks of
/// `batch_size`; the final chunk may be shorter.
pub fn local_train(
    global: &ModelWeights,
    data: &DeviceDataset,
    params: &TrainParams,
    rng: &mut Stream,
) -> Result<WeightDelta> {
    params.validate()?;
    if data.is_empty() {
        return Err(Error::contract(format!(
            "device {} has no samples to train on",
            data.device_id
        )));
    }
    let input_dim = data.samples[0].input.len();
    let probe = Batch::new(vec![0.0; input_dim], input_dim, vec![0])?;
    check_batch(&global.spec, &probe)?;

    let mut local = global.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..params.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(params.batch_size) {
            let batch = Batch::from_samples(chunk.iter().map(|&i| &data.samples[i]))?;
            check_batch(&local.spec, &batch)?;
            let (_, _, grad) = loss_and_grad(&local, &batch, true);
            for (p, g) in local.params.iter_mut().zip(&grad) {
                *p -= params.lr * g;
            }
            if local.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence {
                    device: data.device_id,
                    round: None,
                });
            }
        }
    }
    WeightDelta::between(&local, global)
}
