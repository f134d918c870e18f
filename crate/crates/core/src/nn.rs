//! Dense feed-forward networks with exact per-example gradients.
//!
//! Parameters are addressed through a single flat layout: for each layer in
//! order, the weight matrix (row-major, `out × in`) followed by the bias
//! vector. [`ParamSubset`] selects whole weight or bias blocks out of that
//! layout and [`ParamVector`] carries values over such a selection.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::record::Record;
use crate::rng::{self, purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidConfig(format!("unknown activation `{other}`"))),
        }
    }
}

/// A dense network. Hidden layers use `hidden_activation`; the output layer
/// is always linear (logits for classification).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    hidden_activation: Activation,
    init_seed: Option<u64>,
}

/// Activations recorded during a forward pass. `post[0]` is the input.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("trace has at least the input")
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidDimensions(
            "a model needs at least an input and an output layer".into(),
        ));
    }
    if layer_dims.contains(&0) {
        return Err(Error::InvalidDimensions(format!(
            "layer sizes must be positive, got {layer_dims:?}"
        )));
    }
    Ok(())
}

impl MlpModel {
    pub fn zeros(layer_dims: &[usize], hidden_activation: Activation) -> Result<Self> {
        validate_dims(layer_dims)?;
        let weights = layer_dims
            .windows(2)
            .map(|w| vec![0.0; w[0] * w[1]])
            .collect();
        let biases = layer_dims[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            hidden_activation,
            init_seed: None,
        })
    }

    /// Glorot-uniform weights and zero biases, drawn from the model-init
    /// stream of `seed`.
    pub fn seeded(layer_dims: &[usize], hidden_activation: Activation, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(layer_dims, hidden_activation)?;
        let mut rng = rng::stream(seed, purpose::MODEL_INIT);
        for (l, w) in model.weights.iter_mut().enumerate() {
            let (fan_in, fan_out) = (layer_dims[l], layer_dims[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.gen_range(-limit..limit);
            }
        }
        model.init_seed = Some(seed);
        Ok(model)
    }

    pub fn from_parts(
        layer_dims: &[usize],
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        hidden_activation: Activation,
    ) -> Result<Self> {
        validate_dims(layer_dims)?;
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::InvalidDimensions(format!(
                "expected {layers} weight and bias blocks"
            )));
        }
        for l in 0..layers {
            if weights[l].len() != layer_dims[l] * layer_dims[l + 1]
                || biases[l].len() != layer_dims[l + 1]
            {
                return Err(Error::InvalidDimensions(format!(
                    "layer {l} parameter shapes do not match {}x{}",
                    layer_dims[l + 1],
                    layer_dims[l]
                )));
            }
        }
        let model = Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            hidden_activation,
            init_seed: None,
        };
        model.check_finite()?;
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn init_seed(&self) -> Option<u64> {
        self.init_seed
    }

    /// Row-major `out × in` weights of layer `layer`.
    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::LengthMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            b.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        let finite = self
            .weights
            .iter()
            .chain(&self.biases)
            .all(|block| block.iter().all(|v| v.is_finite()));
        if finite {
            Ok(())
        } else {
            Err(Error::NonFinite("model parameters".into()))
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.post.pop().unwrap())
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        if input.len() != self.input_dim() {
            return Err(Error::InputShape {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let layers = self.num_layers();
        let mut pre = Vec::with_capacity(layers);
        let mut post = Vec::with_capacity(layers + 1);
        post.push(input.to_vec());
        for l in 0..layers {
            let (n_in, n_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let a = &post[l];
            let w = &self.weights[l];
            let mut z = self.biases[l].clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                for (wi, ai) in row.iter().zip(a) {
                    *zo += wi * ai;
                }
            }
            let act = if l + 1 == layers {
                Activation::Identity
            } else {
                self.hidden_activation
            };
            let out: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            debug_assert_eq!(out.len(), n_out);
            pre.push(z);
            post.push(out);
        }
        Ok(ForwardTrace { pre, post })
    }

    /// Index of the largest output (first one on ties).
    pub fn predict_class(&self, input: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(input)?))
    }

    /// Adds `scale · ∂(output · output_grad)/∂params` into `grad`, which uses
    /// the flat layout.
    pub fn accumulate_gradient(
        &self,
        trace: &ForwardTrace,
        output_grad: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) {
        debug_assert_eq!(grad.len(), self.param_count());
        debug_assert_eq!(output_grad.len(), self.output_dim());
        let layers = self.num_layers();
        let offsets = self.layer_offsets();
        let mut delta: Vec<f64> = output_grad.iter().map(|g| g * scale).collect();
        for l in (0..layers).rev() {
            let n_in = self.layer_dims[l];
            let a_prev = &trace.post[l];
            let w_off = offsets[l];
            let b_off = w_off + self.weights[l].len();
            for (o, d) in delta.iter().enumerate() {
                let row = &mut grad[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (g, a) in row.iter_mut().zip(a_prev) {
                    *g += d * a;
                }
                grad[b_off + o] += d;
            }
            if l > 0 {
                let w = &self.weights[l];
                let mut next = vec![0.0; n_in];
                for (o, d) in delta.iter().enumerate() {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    for (n, wi) in next.iter_mut().zip(row) {
                        *n += wi * d;
                    }
                }
                let z = &trace.pre[l - 1];
                let a = &trace.post[l];
                for i in 0..n_in {
                    next[i] *= self.hidden_activation.derivative(z[i], a[i]);
                }
                delta = next;
            }
        }
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.num_layers());
        let mut acc = 0;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            offsets.push(acc);
            acc += w.len() + b.len();
        }
        offsets
    }

    pub fn write_into(&self, record: &mut Record, prefix: &str) {
        record.set_list(&format!("{prefix}.layer_dims"), &self.layer_dims);
        record.set(
            &format!("{prefix}.activation"),
            self.hidden_activation.name(),
        );
        match self.init_seed {
            Some(seed) => record.set(&format!("{prefix}.init_seed"), seed),
            None => record.set(&format!("{prefix}.init_seed"), "none"),
        }
        for l in 0..self.num_layers() {
            record.set_list(&format!("{prefix}.layer.{l}.weight"), &self.weights[l]);
            record.set_list(&format!("{prefix}.layer.{l}.bias"), &self.biases[l]);
        }
    }

    pub fn read_from(record: &Record, prefix: &str) -> Result<Self> {
        let dims: Vec<usize> = record.parse_list(&format!("{prefix}.layer_dims"))?;
        let activation = Activation::from_name(record.require(&format!("{prefix}.activation"))?)?;
        let seed_raw = record.require(&format!("{prefix}.init_seed"))?;
        let init_seed = match seed_raw {
            "none" => None,
            _ => Some(record.parse_value(&format!("{prefix}.init_seed"))?),
        };
        validate_dims(&dims)?;
        let layers = dims.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            weights.push(record.parse_list(&format!("{prefix}.layer.{l}.weight"))?);
            biases.push(record.parse_list(&format!("{prefix}.layer.{l}.bias"))?);
        }
        let mut model = Self::from_parts(&dims, weights, biases, activation)?;
        model.init_seed = init_seed;
        Ok(model)
    }

    pub fn to_checkpoint(&self) -> Record {
        let mut record = Record::new("mlp-checkpoint");
        record.set("layout", "per layer: weight (row-major out x in) then bias");
        self.write_into(&mut record, "model");
        record
    }

    pub fn from_checkpoint(record: &Record) -> Result<Self> {
        record.expect_kind("mlp-checkpoint")?;
        Self::read_from(record, "model")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Record::read(path)?)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Parameter subsets and vectors

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// An ordered selection of weight/bias blocks. Values are flattened block by
/// block in selector order; weight blocks are row-major `out × in`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSubset {
    selectors: Vec<(usize, ParamKind)>,
    indices: Vec<usize>,
    full_len: usize,
}

impl ParamSubset {
    pub fn new(layer_dims: &[usize], selectors: &[(usize, ParamKind)]) -> Result<Self> {
        validate_dims(layer_dims)?;
        let layers = layer_dims.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut acc = 0;
        for l in 0..layers {
            let w = layer_dims[l] * layer_dims[l + 1];
            offsets.push((acc, w, acc + w, layer_dims[l + 1]));
            acc += w + layer_dims[l + 1];
        }
        let mut indices = Vec::new();
        for (i, &(layer, kind)) in selectors.iter().enumerate() {
            if layer >= layers {
                return Err(Error::InvalidConfig(format!(
                    "selector references layer {layer}, model has {layers}"
                )));
            }
            if selectors[..i].contains(&(layer, kind)) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate selector ({layer}, {kind:?})"
                )));
            }
            let (w_off, w_len, b_off, b_len) = offsets[layer];
            match kind {
                ParamKind::Weight => indices.extend(w_off..w_off + w_len),
                ParamKind::Bias => indices.extend(b_off..b_off + b_len),
            }
        }
        Ok(Self {
            selectors: selectors.to_vec(),
            indices,
            full_len: acc,
        })
    }

    /// Every parameter, in the model's flat order.
    pub fn all(layer_dims: &[usize]) -> Result<Self> {
        let layers = layer_dims.len().saturating_sub(1);
        let selectors: Vec<_> = (0..layers)
            .flat_map(|l| [(l, ParamKind::Weight), (l, ParamKind::Bias)])
            .collect();
        Self::new(layer_dims, &selectors)
    }

    /// Bias blocks of the given layers.
    pub fn biases(layer_dims: &[usize], layers: &[usize]) -> Result<Self> {
        let selectors: Vec<_> = layers.iter().map(|&l| (l, ParamKind::Bias)).collect();
        Self::new(layer_dims, &selectors)
    }

    pub fn selectors(&self) -> &[(usize, ParamKind)] {
        &self.selectors
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Positions of the subset's coordinates within the full flat layout.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn full_len(&self) -> usize {
        self.full_len
    }

    /// Encodes as e.g. `0:weight,0:bias,1:bias`.
    pub fn to_spec(&self) -> String {
        self.selectors
            .iter()
            .map(|(l, k)| {
                let kind = match k {
                    ParamKind::Weight => "weight",
                    ParamKind::Bias => "bias",
                };
                format!("{l}:{kind}")
            })
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Parses the [`ParamSubset::to_spec`] encoding; `all` selects everything.
    pub fn from_spec(layer_dims: &[usize], spec: &str) -> Result<Self> {
        if spec.trim() == "all" {
            return Self::all(layer_dims);
        }
        let mut selectors = Vec::new();
        for item in spec.split(',') {
            let (layer, kind) = item.trim().split_once(':').ok_or_else(|| {
                Error::InvalidConfig(format!("bad parameter selector `{item}`"))
            })?;
            let layer: usize = layer
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad layer index `{layer}`")))?;
            let kind = match kind {
                "weight" => ParamKind::Weight,
                "bias" => ParamKind::Bias,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "bad parameter kind `{other}`"
                    )))
                }
            };
            selectors.push((layer, kind));
        }
        Self::new(layer_dims, &selectors)
    }
}

/// Values over a [`ParamSubset`]. Arithmetic requires identical layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<ParamSubset>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamSubset>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<ParamSubset>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LengthMismatch(format!(
                "{} values for a {}-parameter layout",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    /// Picks the subset's coordinates out of a full flat parameter vector.
    pub fn gather(layout: &Arc<ParamSubset>, full: &[f64]) -> Result<Self> {
        if full.len() != layout.full_len() {
            return Err(Error::LengthMismatch(format!(
                "full vector has {} values, layout expects {}",
                full.len(),
                layout.full_len()
            )));
        }
        let values = layout.indices().iter().map(|&i| full[i]).collect();
        Ok(Self {
            values,
            layout: Arc::clone(layout),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &Arc<ParamSubset> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    fn check(&self, other: &ParamVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch)
        }
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    /// `self += factor · other`
    pub fn add_scaled(&mut self, other: &ParamVector, factor: f64) -> Result<()> {
        self.check(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
        Ok(())
    }

    /// Arithmetic mean, accumulated in slice order.
    pub fn mean(vectors: &[ParamVector]) -> Result<ParamVector> {
        let first = vectors.first().ok_or(Error::EmptyBatch)?;
        let mut acc = ParamVector::zeros(Arc::clone(&first.layout));
        for v in vectors {
            acc.add_scaled(v, 1.0)?;
        }
        acc.scale(1.0 / vectors.len() as f64);
        Ok(acc)
    }
}

// ---------------------------------------------------------------------------
// Losses

/// A per-example loss on the model output.
pub trait Loss: Sync {
    type Target: Sync;

    fn value(&self, output: &[f64], target: &Self::Target) -> Result<f64>;

    /// Returns the loss and writes `∂loss/∂output` into `grad`.
    fn value_and_grad(&self, output: &[f64], target: &Self::Target, grad: &mut [f64])
        -> Result<f64>;
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `−ln softmax(logits)[label]`, via max-subtracted log-sum-exp.
pub fn loss_softmax_xent(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let top = argmax(logits);
    let max = logits[top];
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, z)| (z - max).exp())
        .sum();
    Ok((max - logits[label]) + rest.ln_1p())
}

pub fn loss_l1(prediction: f64, target: f64) -> Result<f64> {
    if !prediction.is_finite() || !target.is_finite() {
        return Err(Error::NonFinite("l1 loss inputs".into()));
    }
    Ok((prediction - target).abs())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SoftmaxCrossEntropy;

impl Loss for SoftmaxCrossEntropy {
    type Target = usize;

    fn value(&self, output: &[f64], target: &usize) -> Result<f64> {
        loss_softmax_xent(output, *target)
    }

    fn value_and_grad(&self, output: &[f64], target: &usize, grad: &mut [f64]) -> Result<f64> {
        let loss = loss_softmax_xent(output, *target)?;
        for (g, p) in grad.iter_mut().zip(softmax(output)) {
            *g = p;
        }
        grad[*target] -= 1.0;
        Ok(loss)
    }
}

fn scalar_output(output: &[f64]) -> Result<f64> {
    match output {
        [v] => Ok(*v),
        _ => Err(Error::InputShape {
            expected: 1,
            got: output.len(),
        }),
    }
}

/// `|prediction − target|` on a single-output model. The subgradient at the
/// kink is taken as 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct L1Loss;

impl Loss for L1Loss {
    type Target = f64;

    fn value(&self, output: &[f64], target: &f64) -> Result<f64> {
        loss_l1(scalar_output(output)?, *target)
    }

    fn value_and_grad(&self, output: &[f64], target: &f64, grad: &mut [f64]) -> Result<f64> {
        let prediction = scalar_output(output)?;
        let diff = prediction - target;
        grad[0] = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        loss_l1(prediction, *target)
    }
}

/// `½ (prediction − target)²` on a single-output model.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredLoss;

impl Loss for SquaredLoss {
    type Target = f64;

    fn value(&self, output: &[f64], target: &f64) -> Result<f64> {
        let diff = scalar_output(output)? - target;
        Ok(0.5 * diff * diff)
    }

    fn value_and_grad(&self, output: &[f64], target: &f64, grad: &mut [f64]) -> Result<f64> {
        let diff = scalar_output(output)? - target;
        grad[0] = diff;
        Ok(0.5 * diff * diff)
    }
}

// ---------------------------------------------------------------------------
// Per-example gradients

#[derive(Debug, Clone, Copy)]
pub struct Example<'a, T> {
    pub input: &'a [f64],
    pub target: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Everything on the calling thread.
    #[default]
    Serial,
    /// Examples fan out over the rayon pool; results keep batch order.
    Parallel,
}

/// Loss, output and full flat gradient of one example.
pub fn example_gradient<L: Loss>(
    model: &MlpModel,
    input: &[f64],
    target: &L::Target,
    loss: &L,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let trace = model.forward_trace(input)?;
    let mut dout = vec![0.0; model.output_dim()];
    let value = loss.value_and_grad(trace.output(), target, &mut dout)?;
    let mut grad = vec![0.0; model.param_count()];
    model.accumulate_gradient(&trace, &dout, 1.0, &mut grad);
    Ok((value, trace.output().to_vec(), grad))
}

/// Unweighted per-example gradients restricted to `subset`, in batch order.
pub fn per_example_gradients<L: Loss>(
    model: &MlpModel,
    batch: &[Example<'_, L::Target>],
    loss: &L,
    subset: &Arc<ParamSubset>,
    execution: Execution,
) -> Result<Vec<ParamVector>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if subset.full_len() != model.param_count() {
        return Err(Error::LayoutMismatch);
    }
    let one = |ex: &Example<'_, L::Target>| -> Result<ParamVector> {
        let (_, _, grad) = example_gradient(model, ex.input, &ex.target, loss)?;
        ParamVector::gather(subset, &grad)
    };
    match execution {
        Execution::Serial => batch.iter().map(one).collect(),
        Execution::Parallel => batch.par_iter().map(one).collect(),
    }
}

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Finite-difference gradient of one example's loss over `subset`.
pub fn finite_diff_gradient<L: Loss>(
    model: &MlpModel,
    example: &Example<'_, L::Target>,
    loss: &L,
    subset: &Arc<ParamSubset>,
    step: f64,
) -> Result<ParamVector> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    if subset.full_len() != model.param_count() {
        return Err(Error::LayoutMismatch);
    }
    // Validate once so the closure below cannot fail on shape.
    loss.value(&model.forward(example.input)?, &example.target)?;
    let mut flat = model.flat_params();
    let start: Vec<f64> = subset.indices().iter().map(|&i| flat[i]).collect();
    let mut probe = model.clone();
    let values = central_difference(
        |sub: &[f64]| {
            for (&idx, &v) in subset.indices().iter().zip(sub) {
                flat[idx] = v;
            }
            probe.set_flat_params(&flat).expect("layout checked");
            let out = probe.forward(example.input).expect("shape checked");
            loss.value(&out, &example.target).expect("target checked")
        },
        &start,
        step,
    );
    ParamVector::from_values(Arc::clone(subset), values)
}
