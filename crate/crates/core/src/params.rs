//! Parameter containers, the small dense model family, and local SGD.
//!
//! Parameters are stored as `f32`. Forward/backward passes, means and norms
//! run in `f64` and only the results are rounded back to storage precision.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// One named parameter tensor, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub values: Vec<f32>,
}

/// Ordered list of named flat tensors.
///
/// Layer names are unique and their order is fixed by the [`ModelSpec`] that
/// produced the container.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayeredParams {
    layers: Vec<Layer>,
}

impl LayeredParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        for (i, layer) in layers.iter().enumerate() {
            if layers[..i].iter().any(|l| l.name == layer.name) {
                return Err(Error::config(format!(
                    "duplicate layer name `{}`",
                    layer.name
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Same layout as `self`, every value zero.
    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, name: &str) -> Result<&Layer> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::config(format!("unknown layer `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.name.as_str())
    }

    /// Total parameter count over all layers.
    pub fn total_len(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = f32> + '_ {
        self.layers.iter().flat_map(|l| l.values.iter().copied())
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.name == b.name && a.values.len() == b.values.len())
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::config("parameter layout mismatch"))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f32::is_finite)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    name: l.name.clone(),
                    values: l.values.iter().map(|&v| f(v)).collect(),
                })
                .collect(),
        }
    }

    /// Elementwise combination of two same-layout containers.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.check_layout(other)?;
        Ok(Self {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| Layer {
                    name: a.name.clone(),
                    values: a
                        .values
                        .iter()
                        .zip(&b.values)
                        .map(|(&x, &y)| f(x, y))
                        .collect(),
                })
                .collect(),
        })
    }

    /// Squared L2 distance to `other`, per layer, accumulated in `f64`.
    pub fn layer_sq_distances(&self, other: &Self) -> Result<Vec<f64>> {
        self.check_layout(other)?;
        Ok(self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                compensated_sum(a.values.iter().zip(&b.values).map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                }))
            })
            .collect())
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Arithmetic mean of a slice of stored values in extended precision.
pub fn mean_f64(values: &[f32]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    compensated_sum(values.iter().map(|&v| v as f64)) / values.len() as f64
}

/// Mean of one named layer.
pub fn layer_mean(p: &LayeredParams, layer: &str) -> Result<f64> {
    Ok(mean_f64(&p.layer(layer)?.values))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Dense network shape: `input_dim -> hidden_dims... -> num_classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: Vec::new(),
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden.to_vec(),
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("model.num_classes must be positive"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer, input to output.
    ///
    /// A zero-width hidden entry is skipped.
    pub fn dense_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(self.hidden_dims.iter().copied().filter(|&h| h > 0));
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// `(name, len)` of every tensor in storage order.
    pub fn layer_shapes(&self) -> Vec<(String, usize)> {
        self.dense_dims()
            .into_iter()
            .enumerate()
            .flat_map(|(i, (fan_in, fan_out))| {
                [
                    (format!("fc{i}.weight"), fan_in * fan_out),
                    (format!("fc{i}.bias"), fan_out),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(_, n)| n).sum()
    }

    pub fn zeros(&self) -> LayeredParams {
        LayeredParams {
            layers: self
                .layer_shapes()
                .into_iter()
                .map(|(name, len)| Layer {
                    name,
                    values: vec![0.0; len],
                })
                .collect(),
        }
    }

    pub fn matches(&self, p: &LayeredParams) -> bool {
        let shapes = self.layer_shapes();
        shapes.len() == p.layers.len()
            && shapes
                .iter()
                .zip(&p.layers)
                .all(|((n, len), l)| *n == l.name && *len == l.values.len())
    }
}

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f32>,
        labels: Vec<usize>,
        input_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if input_dim == 0 || features.len() != labels.len() * input_dim {
            return Err(Error::data(format!(
                "{} feature values do not form {} rows of width {input_dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::data(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            features,
            labels,
            input_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            input_dim: self.input_dim,
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Kaiming-normal weights (variance `2 / fan_in`), zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> LayeredParams {
    let mut rng = seed::rng(seed);
    let mut p = spec.zeros();
    for (i, (fan_in, _)) in spec.dense_dims().into_iter().enumerate() {
        let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let weight = &mut p.layers[2 * i].values;
        for w in weight.iter_mut() {
            *w = normal.sample(&mut rng) as f32;
        }
    }
    p
}

fn check_inputs(p: &LayeredParams, spec: &ModelSpec, data: &Dataset) -> Result<()> {
    if !spec.matches(p) {
        return Err(Error::config("parameters do not match the model spec"));
    }
    if data.input_dim != spec.input_dim {
        return Err(Error::config(format!(
            "data width {} does not match model input_dim {}",
            data.input_dim, spec.input_dim
        )));
    }
    if data.num_classes > spec.num_classes {
        return Err(Error::config(format!(
            "data has {} classes but the model outputs {}",
            data.num_classes, spec.num_classes
        )));
    }
    Ok(())
}

/// Dense stack evaluated in `f64`.
struct Network {
    dims: Vec<(usize, usize)>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl Network {
    fn new(p: &LayeredParams, spec: &ModelSpec) -> Self {
        let dims = spec.dense_dims();
        let widen = |l: &Layer| l.values.iter().map(|&v| v as f64).collect::<Vec<_>>();
        Self {
            weights: (0..dims.len()).map(|i| widen(&p.layers[2 * i])).collect(),
            biases: (0..dims.len())
                .map(|i| widen(&p.layers[2 * i + 1]))
                .collect(),
            dims,
        }
    }

    /// Fills `acts` (layer inputs) and `pre` (pre-activations) and returns logits.
    fn forward(&self, x: &[f32], acts: &mut Vec<Vec<f64>>, pre: &mut Vec<Vec<f64>>) -> Vec<f64> {
        acts.clear();
        pre.clear();
        acts.push(x.iter().map(|&v| v as f64).collect());
        let last = self.dims.len() - 1;
        for (l, &(fan_in, fan_out)) in self.dims.iter().enumerate() {
            let input = &acts[l];
            let w = &self.weights[l];
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + self.biases[l][o]
                })
                .collect();
            if l < last {
                acts.push(z.iter().map(|&v| v.max(0.0)).collect());
                pre.push(z);
            } else {
                return z;
            }
        }
        unreachable!("network has at least one layer")
    }

    fn logits(&self, x: &[f32]) -> Vec<f64> {
        self.forward(x, &mut Vec::new(), &mut Vec::new())
    }
}

/// `(logsumexp(z) - z[label], softmax(z))`.
pub(crate) fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = max + total.ln() - logits[label];
    (loss, exps.into_iter().map(|e| e / total).collect())
}

/// Mean softmax cross-entropy over `batch` and its gradient.
pub fn loss_and_grad(
    p: &LayeredParams,
    spec: &ModelSpec,
    batch: &Dataset,
) -> Result<(f64, LayeredParams)> {
    let all: Vec<usize> = (0..batch.len()).collect();
    loss_and_grad_rows(p, spec, batch, &all)
}

/// As [`loss_and_grad`], over the rows of `data` selected by `rows`.
pub fn loss_and_grad_rows(
    p: &LayeredParams,
    spec: &ModelSpec,
    data: &Dataset,
    rows: &[usize],
) -> Result<(f64, LayeredParams)> {
    check_inputs(p, spec, data)?;
    if rows.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let net = Network::new(p, spec);
    let depth = net.dims.len();
    let mut grad_w: Vec<Vec<f64>> = net.weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut grad_b: Vec<Vec<f64>> = net.biases.iter().map(|b| vec![0.0; b.len()]).collect();
    let mut acts = Vec::with_capacity(depth);
    let mut pre = Vec::with_capacity(depth);
    let mut loss = 0.0f64;

    for &r in rows {
        let logits = net.forward(data.row(r), &mut acts, &mut pre);
        let (l, mut delta) = softmax_xent(&logits, data.labels[r]);
        loss += l;
        delta[data.labels[r]] -= 1.0;

        for layer in (0..depth).rev() {
            let (fan_in, fan_out) = net.dims[layer];
            let input = &acts[layer];
            let gw = &mut grad_w[layer];
            for o in 0..fan_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                    for (g, &a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
                grad_b[layer][o] += d;
            }
            if layer > 0 {
                let w = &net.weights[layer];
                let z = &pre[layer - 1];
                let mut back = vec![0.0f64; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d != 0.0 {
                        for (b, &wv) in back.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                            *b += d * wv;
                        }
                    }
                }
                for (b, &zv) in back.iter_mut().zip(z) {
                    if zv <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
    }

    let scale = 1.0 / rows.len() as f64;
    let mut grad = spec.zeros();
    for layer in 0..depth {
        for (g, v) in grad.layers[2 * layer].values.iter_mut().zip(&grad_w[layer]) {
            *g = (v * scale) as f32;
        }
        for (g, v) in grad.layers[2 * layer + 1]
            .values
            .iter_mut()
            .zip(&grad_b[layer])
        {
            *g = (v * scale) as f32;
        }
    }
    Ok((loss * scale, grad))
}

/// Per-sample logits, in `f64`.
pub fn predict_logits(
    p: &LayeredParams,
    spec: &ModelSpec,
    data: &Dataset,
) -> Result<Vec<Vec<f64>>> {
    check_inputs(p, spec, data)?;
    let net = Network::new(p, spec);
    Ok((0..data.len()).map(|i| net.logits(data.row(i))).collect())
}

/// Mean cross-entropy over a whole dataset, without the gradient.
pub fn mean_loss(p: &LayeredParams, spec: &ModelSpec, data: &Dataset) -> Result<f64> {
    let logits = predict_logits(p, spec, data)?;
    if logits.is_empty() {
        return Ok(0.0);
    }
    let total = compensated_sum(
        logits
            .iter()
            .zip(&data.labels)
            .map(|(z, &y)| softmax_xent(z, y).0),
    );
    Ok(total / logits.len() as f64)
}

/// Heavy-ball SGD: `v' = momentum * v + grad`, `p' = p - lr * v'`.
pub fn sgd_step(
    p: &LayeredParams,
    grad: &LayeredParams,
    velocity: &LayeredParams,
    lr: f32,
    momentum: f32,
) -> Result<(LayeredParams, LayeredParams)> {
    let v = velocity.zip_with(grad, |v, g| momentum * v + g)?;
    let next = p.zip_with(&v, |w, v| w - lr * v)?;
    Ok((next, v))
}

/// In-place form of [`sgd_step`] used by the training loop.
pub(crate) fn sgd_step_in_place(
    p: &mut LayeredParams,
    grad: &LayeredParams,
    velocity: &mut LayeredParams,
    lr: f32,
    momentum: f32,
) {
    for ((pl, gl), vl) in p
        .layers
        .iter_mut()
        .zip(&grad.layers)
        .zip(&mut velocity.layers)
    {
        for ((w, &g), v) in pl
            .values
            .iter_mut()
            .zip(&gl.values)
            .zip(vl.values.iter_mut())
        {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
    }
}
