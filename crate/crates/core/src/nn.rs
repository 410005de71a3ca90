//! Minimal dense feed-forward classifier with exact manual backpropagation.
//!
//! Everything is `f64`. Hidden layers use ReLU, the output layer is linear,
//! and the loss is mean softmax cross-entropy. Parameter sets support the
//! scalar-weighted linear combination the aggregation protocol is built on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One dense layer: row-major weight matrix (`out_dim` x `in_dim`) plus a bias
/// per output unit. Row `j` holds the weights feeding output unit `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl Layer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Layer {
            weights: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
            out_dim,
            in_dim,
        }
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.in_dim..(j + 1) * self.in_dim]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.weights[j * self.in_dim..(j + 1) * self.in_dim]
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.out_dim == other.out_dim && self.in_dim == other.in_dim
    }
}

/// Full parameter set of one classifier.
///
/// The final layer's weight rows are the class-specific weight vectors: row
/// `j` connects the penultimate layer to output unit `j`, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

impl ModelParams {
    /// All-zero parameters for the given layer sizes.
    pub fn zeros(architecture: &[usize]) -> Result<Self> {
        if architecture.len() < 2 || architecture.contains(&0) {
            return Err(Error::Config(format!(
                "invalid architecture {architecture:?}"
            )));
        }
        Ok(ModelParams {
            layers: architecture
                .windows(2)
                .map(|w| Layer::zeros(w[1], w[0]))
                .collect(),
        })
    }

    /// Layer sizes as `[input_dim, hidden.., num_classes]`.
    pub fn architecture(&self) -> Vec<usize> {
        let mut arch = vec![self.layers[0].in_dim];
        arch.extend(self.layers.iter().map(|l| l.out_dim));
        arch
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim
    }

    pub fn final_layer(&self) -> &Layer {
        self.layers.last().expect("at least one layer")
    }

    pub fn final_layer_mut(&mut self) -> &mut Layer {
        self.layers.last_mut().expect("at least one layer")
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn same_architecture(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.same_shape(b))
    }

    /// All parameters in a fixed order (layer by layer, weights then bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Overwrites all parameters from a flat vector in `flatten` order.
    pub fn assign_from_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat vector has {} values, model has {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&values[offset..offset + nw]);
            offset += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&values[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }
}

/// Per-parameter partial derivatives, shape-identical to the [`ModelParams`]
/// they were computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Layer>,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradientSet {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.out_dim, l.in_dim))
                .collect(),
        }
    }

    pub fn shape_matches(&self, params: &ModelParams) -> bool {
        self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(a, b)| a.same_shape(b))
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &GradientSet) {
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            for (d, s) in dst.weights.iter_mut().zip(&src.weights) {
                *d += s;
            }
            for (d, s) in dst.bias.iter_mut().zip(&src.bias) {
                *d += s;
            }
        }
    }
}

/// A mini-batch: row-major inputs (`len` x `input_dim`) and one class index
/// per row.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub input_dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, input_dim: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Argument(
                "batch must contain at least one sample".into(),
            ));
        }
        if input_dim == 0 || inputs.len() != labels.len() * input_dim {
            return Err(Error::Shape(format!(
                "inputs length {} does not match {} samples x dim {}",
                inputs.len(),
                labels.len(),
                input_dim
            )));
        }
        Ok(Batch {
            inputs,
            labels,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Additive penalty hooked into [`loss_and_grad`].
///
/// Returns the penalty value and its gradient contribution, shape-identical
/// to `params`. Hooks that only touch part of the model leave the rest zero.
pub trait Regularizer: Sync {
    fn penalty_and_grad(&self, params: &ModelParams) -> (f64, GradientSet);
}

/// Initializes a network for `architecture = [input_dim, hidden.., classes]`.
///
/// Weights are uniform(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`, biases
/// zero. Deterministic for a fixed seed.
pub fn init_params(architecture: &[usize], seed: u64) -> Result<ModelParams> {
    if architecture.len() < 2 {
        return Err(Error::Config(format!(
            "architecture needs at least input and output sizes, got {:?}",
            architecture
        )));
    }
    if architecture.contains(&0) {
        return Err(Error::Config(format!(
            "architecture has a zero-width layer: {:?}",
            architecture
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(architecture.len() - 1);
    for w in architecture.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut layer = Layer::zeros(fan_out, fan_in);
        for v in layer.weights.iter_mut() {
            *v = (2.0 * rng.random::<f64>() - 1.0) * limit;
        }
        layers.push(layer);
    }
    Ok(ModelParams { layers })
}

/// Activation record from [`forward`]: the input fed to each layer.
pub struct ForwardCache {
    /// `layer_inputs[l]` is the (batch x in_dim) activation entering layer `l`.
    layer_inputs: Vec<Vec<f64>>,
}

/// Runs the network on a batch; returns row-major logits (batch x classes)
/// and the activation cache needed for exact backprop.
pub fn forward(params: &ModelParams, batch: &Batch) -> Result<(Vec<f64>, ForwardCache)> {
    if batch.input_dim != params.input_dim() {
        return Err(Error::Shape(format!(
            "batch input dim {} does not match model input dim {}",
            batch.input_dim,
            params.input_dim()
        )));
    }
    let n = batch.len();
    let n_layers = params.layers.len();
    let mut layer_inputs = Vec::with_capacity(n_layers);
    let mut current = batch.inputs.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut out = vec![0.0; n * layer.out_dim];
        for b in 0..n {
            let x = &current[b * layer.in_dim..(b + 1) * layer.in_dim];
            let y = &mut out[b * layer.out_dim..(b + 1) * layer.out_dim];
            for (j, yj) in y.iter_mut().enumerate() {
                let row = layer.row(j);
                let mut acc = layer.bias[j];
                for (w, xi) in row.iter().zip(x) {
                    acc += w * xi;
                }
                *yj = acc;
            }
        }
        let is_last = l + 1 == n_layers;
        if !is_last {
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        layer_inputs.push(std::mem::replace(&mut current, out));
    }
    Ok((current, ForwardCache { layer_inputs }))
}

/// Per-sample softmax probabilities with max-subtraction for stability.
fn softmax_rows(logits: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut probs = vec![0.0; n * k];
    for b in 0..n {
        let row = &logits[b * k..(b + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, &l) in probs[b * k..(b + 1) * k].iter_mut().zip(row) {
            *p = (l - m).exp();
            z += *p;
        }
        for p in probs[b * k..(b + 1) * k].iter_mut() {
            *p /= z;
        }
    }
    probs
}

/// Mean softmax cross-entropy over the batch plus the optional regularizer
/// penalty, with the exact gradient of that total.
///
/// The regularizer's gradient contribution is added on top of the data-loss
/// gradient (once per batch; the penalty does not depend on the data).
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &Batch,
    reg: Option<&dyn Regularizer>,
) -> Result<(f64, GradientSet)> {
    let k = params.num_classes();
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= k) {
        return Err(Error::Argument(format!(
            "label {} out of range for {} classes",
            bad, k
        )));
    }
    let (logits, cache) = forward(params, batch)?;
    let n = batch.len();
    let probs = softmax_rows(&logits, n, k);

    let mut data_loss = 0.0;
    for (b, &label) in batch.labels.iter().enumerate() {
        let row = &logits[b * k..(b + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|&l| (l - m).exp()).sum::<f64>().ln() + m;
        data_loss += log_z - row[label];
    }
    data_loss /= n as f64;

    // delta for the output layer: (softmax - onehot) / n
    let mut delta = probs;
    for (b, &label) in batch.labels.iter().enumerate() {
        delta[b * k + label] -= 1.0;
    }
    let inv_n = 1.0 / n as f64;
    for d in delta.iter_mut() {
        *d *= inv_n;
    }

    let mut grads = GradientSet::zeros_like(params);
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let inputs = &cache.layer_inputs[l];
        let g = &mut grads.layers[l];
        for b in 0..n {
            let d = &delta[b * layer.out_dim..(b + 1) * layer.out_dim];
            let x = &inputs[b * layer.in_dim..(b + 1) * layer.in_dim];
            for (j, &dj) in d.iter().enumerate() {
                let grow = g.row_mut(j);
                for (gw, xi) in grow.iter_mut().zip(x) {
                    *gw += dj * xi;
                }
                g.bias[j] += dj;
            }
        }
        if l > 0 {
            // propagate through the layer and the ReLU of the layer below
            let mut prev = vec![0.0; n * layer.in_dim];
            for b in 0..n {
                let d = &delta[b * layer.out_dim..(b + 1) * layer.out_dim];
                let x = &inputs[b * layer.in_dim..(b + 1) * layer.in_dim];
                let p = &mut prev[b * layer.in_dim..(b + 1) * layer.in_dim];
                for (j, &dj) in d.iter().enumerate() {
                    let row = layer.row(j);
                    for (pi, w) in p.iter_mut().zip(row) {
                        *pi += dj * w;
                    }
                }
                for (pi, &xi) in p.iter_mut().zip(x) {
                    if xi <= 0.0 {
                        *pi = 0.0;
                    }
                }
            }
            delta = prev;
        }
    }

    let mut total = data_loss;
    if let Some(hook) = reg {
        let (penalty, reg_grad) = hook.penalty_and_grad(params);
        total += penalty;
        grads.add_assign(&reg_grad);
    }
    if !total.is_finite() {
        return Err(Error::Numerical(format!("loss is not finite ({total})")));
    }
    Ok((total, grads))
}

/// One plain SGD step: `params - lr * grads`, elementwise.
pub fn sgd_step(params: &ModelParams, grads: &GradientSet, lr: f64) -> Result<ModelParams> {
    if lr <= 0.0 {
        return Err(Error::Argument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if !grads.shape_matches(params) {
        return Err(Error::Shape(
            "gradient shapes do not match parameters".into(),
        ));
    }
    let mut next = params.clone();
    for (layer, g) in next.layers.iter_mut().zip(&grads.layers) {
        for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
            *w -= lr * gw;
        }
        for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
    Ok(next)
}

/// `sum_k coefficients[k] * models[k]` over every weight and bias.
pub fn linear_combine(models: &[ModelParams], coefficients: &[f64]) -> Result<ModelParams> {
    if models.is_empty() {
        return Err(Error::Argument(
            "linear_combine needs at least one model".into(),
        ));
    }
    if models.len() != coefficients.len() {
        return Err(Error::Argument(format!(
            "{} models but {} coefficients",
            models.len(),
            coefficients.len()
        )));
    }
    if let Some(bad) = models.iter().find(|m| !m.same_architecture(&models[0])) {
        return Err(Error::Shape(format!(
            "architecture mismatch: {:?} vs {:?}",
            bad.architecture(),
            models[0].architecture()
        )));
    }
    let mut acc = models[0].clone();
    for layer in acc.layers.iter_mut() {
        for w in layer.weights.iter_mut() {
            *w *= coefficients[0];
        }
        for b in layer.bias.iter_mut() {
            *b *= coefficients[0];
        }
    }
    for (model, &c) in models.iter().zip(coefficients).skip(1) {
        for (dst, src) in acc.layers.iter_mut().zip(&model.layers) {
            for (w, s) in dst.weights.iter_mut().zip(&src.weights) {
                *w += c * s;
            }
            for (b, s) in dst.bias.iter_mut().zip(&src.bias) {
                *b += c * s;
            }
        }
    }
    Ok(acc)
}

/// Predicted class per sample (argmax of the logits; ties go to the lowest
/// class index).
pub fn predict(params: &ModelParams, batch: &Batch) -> Result<Vec<usize>> {
    let (logits, _) = forward(params, batch)?;
    let k = params.num_classes();
    Ok((0..batch.len())
        .map(|b| {
            let row = &logits[b * k..(b + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}
