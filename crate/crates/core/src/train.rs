//! Deterministic minibatch training with pluggable per-example weighting.
//!
//! Each step samples a batch with replacement, evaluates every example at the
//! Nesterov look-ahead point, turns the per-example gradients over the
//! GradTail subset into weights `q`, and applies the gradient of
//! `mean(qᵢ·Lᵢ)` to all parameters. Weights are treated as constants.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::baselines::{entropy_score, focal_weight, inverse_frequency_weight, WeightingStrategy};
use crate::data::{Dataset2D, DenseGrid};
use crate::error::{Error, Result};
use crate::gradtail::{BatchWeighting, GradTailConfig, GradTailState};
use crate::nn::{
    self, example_gradient, softmax, Execution, L1Loss, MlpModel, ParamSubset, ParamVector,
    SoftmaxCrossEntropy,
};
use crate::patches::{sample_patches, DEFAULT_PATCH_COUNT, DEFAULT_SIZE_MAX, DEFAULT_SIZE_MIN};
use crate::record::Record;
use crate::rng::{self, purpose};

/// Look-ahead momentum step. `grads` must be evaluated at
/// `params + momentum · velocity`:
///
/// `v ← μ·v − lr·∇L(θ + μ·v)`, `θ ← θ + v`
pub fn nesterov_update(
    params: &mut [f64],
    velocity: &mut [f64],
    grads: &[f64],
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != velocity.len() || params.len() != grads.len() {
        return Err(Error::LengthMismatch(format!(
            "params {}, velocity {}, grads {}",
            params.len(),
            velocity.len(),
            grads.len()
        )));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
    }
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = momentum * *v - learning_rate * g;
        *p += *v;
    }
    Ok(())
}

/// `params + momentum · velocity`
pub fn lookahead(params: &[f64], velocity: &[f64], momentum: f64) -> Vec<f64> {
    params
        .iter()
        .zip(velocity)
        .map(|(p, v)| p + momentum * v)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Seed of the batch-sampling stream.
    pub batch_seed: u64,
    pub strategy: WeightingStrategy,
    /// GradTail parameter subset, in [`ParamSubset::from_spec`] syntax.
    pub gradtail_subset: String,
    pub trace_logging: bool,
    /// Keep a model and GradTail snapshot every this many steps; 0 disables.
    pub snapshot_every: usize,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            learning_rate: 1e-4,
            momentum: 0.9,
            batch_size: 128,
            batch_seed: 0,
            strategy: WeightingStrategy::GradTail(GradTailConfig::default()),
            gradtail_subset: "all".to_string(),
            trace_logging: true,
            snapshot_every: 0,
            execution: Execution::Serial,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if let WeightingStrategy::GradTail(c) = &self.strategy {
            c.validate()?;
        }
        Ok(())
    }

    pub fn write_into(&self, record: &mut Record, prefix: &str) {
        record.set(&format!("{prefix}.steps"), self.steps);
        record.set(&format!("{prefix}.learning_rate"), self.learning_rate);
        record.set(&format!("{prefix}.momentum"), self.momentum);
        record.set(&format!("{prefix}.batch_size"), self.batch_size);
        record.set(&format!("{prefix}.batch_seed"), self.batch_seed);
        record.set(&format!("{prefix}.gradtail_subset"), &self.gradtail_subset);
        record.set(&format!("{prefix}.trace_logging"), self.trace_logging);
        record.set(&format!("{prefix}.snapshot_every"), self.snapshot_every);
        record.set(
            &format!("{prefix}.reference_mode"),
            self.execution == Execution::Serial,
        );
        self.strategy.write_into(record, &format!("{prefix}.strategy"));
    }

    /// Reads keys under `prefix`; absent keys keep `base` values.
    pub fn read_from(record: &Record, prefix: &str, base: &TrainConfig) -> Result<Self> {
        let key = |k: &str| format!("{prefix}.{k}");
        let strategy = if record.get(&key("strategy.name")).is_some() {
            WeightingStrategy::read_from(record, &key("strategy"))?
        } else {
            base.strategy.clone()
        };
        let reference = record.parse_or(&key("reference_mode"), base.execution == Execution::Serial)?;
        let config = Self {
            steps: record.parse_or(&key("steps"), base.steps)?,
            learning_rate: record.parse_or(&key("learning_rate"), base.learning_rate)?,
            momentum: record.parse_or(&key("momentum"), base.momentum)?,
            batch_size: record.parse_or(&key("batch_size"), base.batch_size)?,
            batch_seed: record.parse_or(&key("batch_seed"), base.batch_seed)?,
            strategy,
            gradtail_subset: record
                .get(&key("gradtail_subset"))
                .map(str::to_string)
                .unwrap_or_else(|| base.gradtail_subset.clone()),
            trace_logging: record.parse_or(&key("trace_logging"), base.trace_logging)?,
            snapshot_every: record.parse_or(&key("snapshot_every"), base.snapshot_every)?,
            execution: if reference {
                Execution::Serial
            } else {
                Execution::Parallel
            },
        };
        config.validate()?;
        Ok(config)
    }
}

/// Per-example statistics accumulated over a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleTrace {
    pub id: usize,
    pub occurrences: usize,
    pub theta_sum: f64,
    pub theta_sq_sum: f64,
    pub weight_sum: f64,
    pub loss_sum: f64,
    pub entropy_sum: f64,
    pub correct_count: usize,
}

impl ExampleTrace {
    pub fn new(id: usize) -> Self {
        Self {
            id,
            occurrences: 0,
            theta_sum: 0.0,
            theta_sq_sum: 0.0,
            weight_sum: 0.0,
            loss_sum: 0.0,
            entropy_sum: 0.0,
            correct_count: 0,
        }
    }

    fn mean_of(&self, sum: f64) -> Option<f64> {
        (self.occurrences > 0).then(|| sum / self.occurrences as f64)
    }

    pub fn mean_theta(&self) -> Option<f64> {
        self.mean_of(self.theta_sum)
    }

    pub fn theta_variance(&self) -> Option<f64> {
        let m = self.mean_theta()?;
        Some((self.theta_sq_sum / self.occurrences as f64 - m * m).max(0.0))
    }

    pub fn mean_weight(&self) -> Option<f64> {
        self.mean_of(self.weight_sum)
    }

    pub fn mean_loss(&self) -> Option<f64> {
        self.mean_of(self.loss_sum)
    }

    pub fn mean_entropy(&self) -> Option<f64> {
        self.mean_of(self.entropy_sum)
    }

    pub fn accuracy(&self) -> Option<f64> {
        self.mean_of(self.correct_count as f64)
    }

    fn record(&mut self, theta: f64, weight: f64, loss: f64, entropy: f64, correct: bool) {
        self.occurrences += 1;
        self.theta_sum += theta;
        self.theta_sq_sum += theta * theta;
        self.weight_sum += weight;
        self.loss_sum += loss;
        self.entropy_sum += entropy;
        self.correct_count += correct as usize;
    }
}

pub fn write_traces(traces: &[ExampleTrace], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record([
        "id",
        "occurrences",
        "theta_sum",
        "theta_sq_sum",
        "weight_sum",
        "loss_sum",
        "entropy_sum",
        "correct_count",
    ])
    .map_err(|e| Error::csv(path, e))?;
    for t in traces {
        w.write_record([
            t.id.to_string(),
            t.occurrences.to_string(),
            t.theta_sum.to_string(),
            t.theta_sq_sum.to_string(),
            t.weight_sum.to_string(),
            t.loss_sum.to_string(),
            t.entropy_sum.to_string(),
            t.correct_count.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_traces(path: &Path) -> Result<Vec<ExampleTrace>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let get = |i: usize| row.get(i).unwrap_or("");
        let bad = || Error::Record(format!("{}: malformed trace row", path.display()));
        out.push(ExampleTrace {
            id: get(0).parse().map_err(|_| bad())?,
            occurrences: get(1).parse().map_err(|_| bad())?,
            theta_sum: get(2).parse().map_err(|_| bad())?,
            theta_sq_sum: get(3).parse().map_err(|_| bad())?,
            weight_sum: get(4).parse().map_err(|_| bad())?,
            loss_sum: get(5).parse().map_err(|_| bad())?,
            entropy_sum: get(6).parse().map_err(|_| bad())?,
            correct_count: get(7).parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// One row of the step log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Unweighted batch mean loss.
    pub mean_loss: f64,
    /// `mean(qᵢ·Lᵢ)`, the objective actually differentiated.
    pub weighted_loss: f64,
    pub mean_weight: f64,
    pub sigma: f64,
    pub ema_norm: f64,
    pub warmup: bool,
}

pub fn write_step_log(log: &[StepRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["step", "mean_loss", "weighted_loss", "mean_q", "sigma", "ema_norm", "warmup"])
        .map_err(|e| Error::csv(path, e))?;
    for r in log {
        w.write_record([
            r.step.to_string(),
            r.mean_loss.to_string(),
            r.weighted_loss.to_string(),
            r.mean_weight.to_string(),
            r.sigma.to_string(),
            r.ema_norm.to_string(),
            (r.warmup as u8).to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Data addressable by example id.
pub trait LabeledData: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn input(&self, id: usize) -> &[f64];
    fn label(&self, id: usize) -> usize;
}

impl LabeledData for Dataset2D {
    fn len(&self) -> usize {
        self.points.len()
    }

    fn input(&self, id: usize) -> &[f64] {
        &self.points[id]
    }

    fn label(&self, id: usize) -> usize {
        self.labels[id]
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub velocity: Vec<f64>,
    /// One per dataset example, indexed by id; empty when tracing is off.
    pub traces: Vec<ExampleTrace>,
    pub log: Vec<StepRecord>,
    pub gradtail_state: GradTailState,
    pub gradtail_config: GradTailConfig,
    pub snapshots: Vec<Snapshot>,
}

/// Parameters and GradTail state after `steps_done` steps.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub steps_done: usize,
    pub model: MlpModel,
    pub gradtail_state: GradTailState,
}

fn due(every: usize, steps_done: usize) -> bool {
    every > 0 && steps_done.is_multiple_of(every)
}

/// Shared per-step machinery for both training paths.
struct Weigher {
    strategy: WeightingStrategy,
    config: GradTailConfig,
    state: GradTailState,
    track_theta: bool,
}

impl Weigher {
    fn new(strategy: &WeightingStrategy, layout: Arc<ParamSubset>, track_theta: bool) -> Self {
        // Non-GradTail strategies still run a monitor with default settings so
        // that θ is traced; its weights are ignored.
        let config = match strategy {
            WeightingStrategy::GradTail(c) => *c,
            _ => GradTailConfig::default(),
        };
        Self {
            strategy: strategy.clone(),
            config,
            state: GradTailState::new(layout),
            track_theta,
        }
    }

    fn needs_subset_grads(&self) -> bool {
        self.track_theta || matches!(self.strategy, WeightingStrategy::GradTail(_))
    }

    /// `labels_probs` gives, per example, its label and softmax output when
    /// the task is classification.
    fn weigh(
        &mut self,
        subset_grads: Option<&[ParamVector]>,
        labels_probs: Option<&[(usize, Vec<f64>)]>,
        n: usize,
    ) -> Result<BatchWeighting> {
        let monitored = match subset_grads {
            Some(g) => Some(self.state.step(g, &self.config)?),
            None => None,
        };
        let thetas = monitored
            .as_ref()
            .map(|m| m.thetas.clone())
            .unwrap_or_else(|| vec![0.0; n]);
        let weights = match &self.strategy {
            WeightingStrategy::GradTail(_) => return Ok(monitored.expect("subset grads required")),
            WeightingStrategy::Uniform => vec![1.0; n],
            WeightingStrategy::InverseFrequency(table) => {
                let lp = labels_probs.ok_or_else(|| {
                    Error::InvalidConfig("inverse_frequency needs class labels".into())
                })?;
                lp.iter()
                    .map(|(label, _)| inverse_frequency_weight(*label, table))
                    .collect::<Result<_>>()?
            }
            WeightingStrategy::Focal { gamma } => {
                let lp = labels_probs
                    .ok_or_else(|| Error::InvalidConfig("focal needs class labels".into()))?;
                lp.iter()
                    .map(|(label, probs)| focal_weight(probs, *label, *gamma))
                    .collect::<Result<_>>()?
            }
        };
        Ok(BatchWeighting {
            thetas,
            weights,
            warmup_active: monitored.is_some_and(|m| m.warmup_active),
        })
    }
}

struct ExampleEval {
    loss: f64,
    probs: Vec<f64>,
    grad: Vec<f64>,
}

/// Trains a classifier on `data`, starting from `init`.
pub fn train<D: LabeledData>(data: &D, init: &MlpModel, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.len() == 0 {
        return Err(Error::InsufficientData("dataset is empty".into()));
    }
    if config.batch_size > data.len() {
        return Err(Error::InvalidConfig(format!(
            "batch size {} exceeds dataset size {}",
            config.batch_size,
            data.len()
        )));
    }
    let layout = Arc::new(ParamSubset::from_spec(init.layer_dims(), &config.gradtail_subset)?);
    let mut weigher = Weigher::new(&config.strategy, Arc::clone(&layout), config.trace_logging);
    let mut model = init.clone();
    let mut params = model.flat_params();
    let mut velocity = vec![0.0; params.len()];
    let mut probe = model.clone();
    let mut traces: Vec<ExampleTrace> = if config.trace_logging {
        (0..data.len()).map(ExampleTrace::new).collect()
    } else {
        Vec::new()
    };
    let mut log = Vec::with_capacity(config.steps);
    let mut snapshots = Vec::new();
    let mut rng = rng::stream(config.batch_seed, purpose::BATCH_SAMPLING);
    let loss_fn = SoftmaxCrossEntropy;

    for step in 0..config.steps {
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.gen_range(0..data.len()))
            .collect();
        probe.set_flat_params(&lookahead(&params, &velocity, config.momentum))?;

        let eval = |&id: &usize| -> Result<ExampleEval> {
            let label = data.label(id);
            let (loss, output, grad) = example_gradient(&probe, data.input(id), &label, &loss_fn)?;
            Ok(ExampleEval {
                loss,
                probs: softmax(&output),
                grad,
            })
        };
        let evals: Vec<ExampleEval> = match config.execution {
            Execution::Serial => batch.iter().map(eval).collect::<Result<_>>()?,
            Execution::Parallel => batch.par_iter().map(eval).collect::<Result<_>>()?,
        };
        if let Some(pos) = evals.iter().position(|e| !e.loss.is_finite()) {
            model.set_flat_params(&params)?;
            return Err(Error::NumericalAbort {
                step,
                example: batch[pos],
                snapshot: Box::new(model),
            });
        }

        let subset_grads = if weigher.needs_subset_grads() {
            Some(
                evals
                    .iter()
                    .map(|e| ParamVector::gather(&layout, &e.grad))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let labels_probs: Vec<(usize, Vec<f64>)> = batch
            .iter()
            .zip(&evals)
            .map(|(&id, e)| (data.label(id), e.probs.clone()))
            .collect();
        let weighting = weigher.weigh(subset_grads.as_deref(), Some(&labels_probs), batch.len())?;

        let mut grad = vec![0.0; params.len()];
        for (e, q) in evals.iter().zip(&weighting.weights) {
            for (g, gi) in grad.iter_mut().zip(&e.grad) {
                *g += q * gi;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        nesterov_update(&mut params, &mut velocity, &grad, config.learning_rate, config.momentum)?;

        let losses: Vec<f64> = evals.iter().map(|e| e.loss).collect();
        if config.trace_logging {
            for (k, &id) in batch.iter().enumerate() {
                let probs = &evals[k].probs;
                let entropy = entropy_score(probs).unwrap_or(0.0);
                let correct = nn::argmax(probs) == data.label(id);
                traces[id].record(weighting.thetas[k], weighting.weights[k], losses[k], entropy, correct);
            }
        }
        log.push(StepRecord {
            step,
            mean_loss: losses.iter().sum::<f64>() * inv,
            weighted_loss: crate::gradtail::weighted_loss(&losses, &weighting)?,
            mean_weight: weighting.weights.iter().sum::<f64>() * inv,
            sigma: weigher.state.sigma,
            ema_norm: weigher.state.ema_grad.norm(),
            warmup: weighting.warmup_active,
        });
        if due(config.snapshot_every, step + 1) {
            model.set_flat_params(&params)?;
            snapshots.push(Snapshot {
                steps_done: step + 1,
                model: model.clone(),
                gradtail_state: weigher.state.clone(),
            });
        }
    }
    model.set_flat_params(&params)?;
    model.check_finite()?;
    Ok(TrainOutcome {
        model,
        velocity,
        traces,
        log,
        gradtail_state: weigher.state,
        gradtail_config: weigher.config,
        snapshots,
    })
}

// ---------------------------------------------------------------------------
// Dense regression

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Images sampled (with replacement) per step.
    pub images_per_step: usize,
    pub batch_seed: u64,
    pub strategy: WeightingStrategy,
    pub gradtail_subset: String,
    pub patch_size_min: usize,
    pub patch_size_max: usize,
    pub patch_count: usize,
    /// Keep a model and GradTail snapshot every this many steps; 0 disables.
    pub snapshot_every: usize,
    pub execution: Execution,
}

impl Default for DenseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            learning_rate: 2e-3,
            momentum: 0.9,
            images_per_step: 1,
            batch_seed: 0,
            strategy: WeightingStrategy::GradTail(GradTailConfig {
                pivot: -0.5,
                ..GradTailConfig::default()
            }),
            gradtail_subset: "1:bias,2:bias".to_string(),
            patch_size_min: DEFAULT_SIZE_MIN,
            patch_size_max: DEFAULT_SIZE_MAX,
            patch_count: DEFAULT_PATCH_COUNT,
            snapshot_every: 0,
            execution: Execution::Serial,
        }
    }
}

impl DenseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if self.images_per_step == 0 {
            return Err(Error::InvalidConfig("images_per_step must be positive".into()));
        }
        match &self.strategy {
            WeightingStrategy::Uniform => {}
            WeightingStrategy::GradTail(c) => c.validate()?,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "strategy `{}` needs class labels and cannot weight dense patches",
                    other.name()
                )))
            }
        }
        Ok(())
    }

    pub fn write_into(&self, record: &mut Record, prefix: &str) {
        record.set(&format!("{prefix}.steps"), self.steps);
        record.set(&format!("{prefix}.learning_rate"), self.learning_rate);
        record.set(&format!("{prefix}.momentum"), self.momentum);
        record.set(&format!("{prefix}.images_per_step"), self.images_per_step);
        record.set(&format!("{prefix}.batch_seed"), self.batch_seed);
        record.set(&format!("{prefix}.gradtail_subset"), &self.gradtail_subset);
        record.set(&format!("{prefix}.patch_size_min"), self.patch_size_min);
        record.set(&format!("{prefix}.patch_size_max"), self.patch_size_max);
        record.set(&format!("{prefix}.patch_count"), self.patch_count);
        record.set(&format!("{prefix}.snapshot_every"), self.snapshot_every);
        record.set(
            &format!("{prefix}.reference_mode"),
            self.execution == Execution::Serial,
        );
        self.strategy.write_into(record, &format!("{prefix}.strategy"));
    }

    pub fn read_from(record: &Record, prefix: &str, base: &DenseTrainConfig) -> Result<Self> {
        let key = |k: &str| format!("{prefix}.{k}");
        let strategy = if record.get(&key("strategy.name")).is_some() {
            WeightingStrategy::read_from(record, &key("strategy"))?
        } else {
            base.strategy.clone()
        };
        let reference = record.parse_or(&key("reference_mode"), base.execution == Execution::Serial)?;
        let config = Self {
            steps: record.parse_or(&key("steps"), base.steps)?,
            learning_rate: record.parse_or(&key("learning_rate"), base.learning_rate)?,
            momentum: record.parse_or(&key("momentum"), base.momentum)?,
            images_per_step: record.parse_or(&key("images_per_step"), base.images_per_step)?,
            batch_seed: record.parse_or(&key("batch_seed"), base.batch_seed)?,
            strategy,
            gradtail_subset: record
                .get(&key("gradtail_subset"))
                .map(str::to_string)
                .unwrap_or_else(|| base.gradtail_subset.clone()),
            patch_size_min: record.parse_or(&key("patch_size_min"), base.patch_size_min)?,
            patch_size_max: record.parse_or(&key("patch_size_max"), base.patch_size_max)?,
            patch_count: record.parse_or(&key("patch_count"), base.patch_count)?,
            snapshot_every: record.parse_or(&key("snapshot_every"), base.snapshot_every)?,
            execution: if reference {
                Execution::Serial
            } else {
                Execution::Parallel
            },
        };
        config.validate()?;
        Ok(config)
    }
}

/// One patch "example" from one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchTrace {
    pub step: usize,
    pub image: usize,
    /// Index within the step's regions; the complement comes last.
    pub region: usize,
    pub valid_pixels: usize,
    pub rare_pixels: usize,
    pub theta: f64,
    pub weight: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct DenseOutcome {
    pub model: MlpModel,
    pub log: Vec<StepRecord>,
    pub patch_traces: Vec<PatchTrace>,
    pub gradtail_state: GradTailState,
    pub gradtail_config: GradTailConfig,
    pub snapshots: Vec<Snapshot>,
}

pub fn write_patch_traces(traces: &[PatchTrace], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["step", "image", "region", "valid_pixels", "rare_pixels", "theta", "weight", "loss"])
        .map_err(|e| Error::csv(path, e))?;
    for t in traces {
        w.write_record([
            t.step.to_string(),
            t.image.to_string(),
            t.region.to_string(),
            t.valid_pixels.to_string(),
            t.rare_pixels.to_string(),
            t.theta.to_string(),
            t.weight.to_string(),
            t.loss.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-pixel loss values and gradients for one image at fixed parameters.
fn dense_pixel_grads(model: &MlpModel, grid: &DenseGrid, execution: Execution) -> Result<Vec<(f64, Vec<f64>)>> {
    let one = |p: usize| -> Result<(f64, Vec<f64>)> {
        if !grid.mask[p] {
            return Ok((0.0, Vec::new()));
        }
        let (loss, _, grad) = example_gradient(model, grid.input(p), &grid.targets[p], &L1Loss)?;
        Ok((loss, grad))
    };
    match execution {
        Execution::Serial => (0..grid.pixels()).map(one).collect(),
        Execution::Parallel => (0..grid.pixels()).into_par_iter().map(one).collect(),
    }
}

/// Trains a per-pixel regressor. Each step samples images, splits each into
/// random patches plus the complement, and treats every non-empty region as
/// one example whose loss is the mean L1 loss over its valid pixels.
pub fn train_dense(grids: &[DenseGrid], init: &MlpModel, config: &DenseTrainConfig) -> Result<DenseOutcome> {
    config.validate()?;
    if grids.is_empty() {
        return Err(Error::InsufficientData("no training grids".into()));
    }
    if init.output_dim() != 1 || grids.iter().any(|g| g.feature_dim != init.input_dim()) {
        return Err(Error::InvalidDimensions(
            "dense model must map the grid features to one output".into(),
        ));
    }
    let layout = Arc::new(ParamSubset::from_spec(init.layer_dims(), &config.gradtail_subset)?);
    let mut weigher = Weigher::new(&config.strategy, Arc::clone(&layout), true);
    let mut model = init.clone();
    let mut params = model.flat_params();
    let mut velocity = vec![0.0; params.len()];
    let mut probe = model.clone();
    let mut batch_rng = rng::stream(config.batch_seed, purpose::BATCH_SAMPLING);
    let mut patch_rng = rng::stream(config.batch_seed, purpose::PATCH_SAMPLING);
    let mut log = Vec::with_capacity(config.steps);
    let mut patch_traces = Vec::new();
    let mut snapshots = Vec::new();
    let n_params = params.len();

    for step in 0..config.steps {
        probe.set_flat_params(&lookahead(&params, &velocity, config.momentum))?;
        let mut region_losses = Vec::new();
        let mut region_grads: Vec<Vec<f64>> = Vec::new();
        let mut region_meta = Vec::new();
        for _ in 0..config.images_per_step {
            let image = batch_rng.gen_range(0..grids.len());
            let grid = &grids[image];
            let patches = sample_patches(
                grid.height,
                grid.width,
                &mut patch_rng,
                config.patch_size_min,
                config.patch_size_max,
                config.patch_count,
            )?;
            let pixel = dense_pixel_grads(&probe, grid, config.execution)?;
            if let Some(p) = pixel.iter().position(|(l, _)| !l.is_finite()) {
                model.set_flat_params(&params)?;
                return Err(Error::NumericalAbort {
                    step,
                    example: p,
                    snapshot: Box::new(model),
                });
            }
            for (r, region) in patches.regions().iter().enumerate() {
                let mut grad = vec![0.0; n_params];
                let mut loss = 0.0;
                let mut valid = 0usize;
                let mut rare = 0usize;
                for &p in region.iter().filter(|&&p| grid.mask[p]) {
                    loss += pixel[p].0;
                    for (g, gi) in grad.iter_mut().zip(&pixel[p].1) {
                        *g += gi;
                    }
                    valid += 1;
                    rare += grid.rare[p] as usize;
                }
                if valid > 0 {
                    let inv = 1.0 / valid as f64;
                    loss *= inv;
                    grad.iter_mut().for_each(|g| *g *= inv);
                }
                region_losses.push(loss);
                region_grads.push(grad);
                region_meta.push((image, r, valid, rare));
            }
        }

        let subset_grads = region_grads
            .iter()
            .map(|g| ParamVector::gather(&layout, g))
            .collect::<Result<Vec<_>>>()?;
        let weighting = weigher.weigh(Some(&subset_grads), None, region_grads.len())?;

        let inv = 1.0 / region_grads.len() as f64;
        let mut grad = vec![0.0; n_params];
        for (g_r, q) in region_grads.iter().zip(&weighting.weights) {
            for (g, gi) in grad.iter_mut().zip(g_r) {
                *g += q * gi;
            }
        }
        grad.iter_mut().for_each(|g| *g *= inv);
        nesterov_update(&mut params, &mut velocity, &grad, config.learning_rate, config.momentum)?;

        for (k, &(image, region, valid_pixels, rare_pixels)) in region_meta.iter().enumerate() {
            patch_traces.push(PatchTrace {
                step,
                image,
                region,
                valid_pixels,
                rare_pixels,
                theta: weighting.thetas[k],
                weight: weighting.weights[k],
                loss: region_losses[k],
            });
        }
        log.push(StepRecord {
            step,
            mean_loss: region_losses.iter().sum::<f64>() * inv,
            weighted_loss: crate::gradtail::weighted_loss(&region_losses, &weighting)?,
            mean_weight: weighting.weights.iter().sum::<f64>() * inv,
            sigma: weigher.state.sigma,
            ema_norm: weigher.state.ema_grad.norm(),
            warmup: weighting.warmup_active,
        });
        if due(config.snapshot_every, step + 1) {
            model.set_flat_params(&params)?;
            snapshots.push(Snapshot {
                steps_done: step + 1,
                model: model.clone(),
                gradtail_state: weigher.state.clone(),
            });
        }
    }
    model.set_flat_params(&params)?;
    model.check_finite()?;
    Ok(DenseOutcome {
        model,
        log,
        patch_traces,
        gradtail_state: weigher.state,
        gradtail_config: weigher.config,
        snapshots,
    })
}

/// Per-pixel predictions of a dense model over a grid.
pub fn predict_dense(model: &MlpModel, grid: &DenseGrid) -> Result<Vec<f64>> {
    (0..grid.pixels())
        .map(|p| Ok(model.forward(grid.input(p))?[0]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_toy;
    use crate::nn::Activation;

    #[test]
    fn plain_descent_when_momentum_is_zero() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        nesterov_update(&mut p, &mut v, &[0.5, 1.0], 0.1, 0.0).unwrap();
        assert_eq!(p, vec![1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn velocity_decays_without_gradient() {
        let mut p = vec![0.0];
        let mut v = vec![1.0];
        for k in 1..=5 {
            nesterov_update(&mut p, &mut v, &[0.0], 0.1, 0.9).unwrap();
            assert!((v[0] - 0.9f64.powi(k)).abs() < 1e-15);
        }
        assert!(nesterov_update(&mut p, &mut v, &[0.0, 1.0], 0.1, 0.9).is_err());
    }

    #[test]
    fn quadratic_bowl_matches_recurrence() {
        // L = θ²/2, so ∇L(θ + μv) = θ + μv.
        let (lr, mu) = (0.1, 0.9);
        let (mut theta, mut vel) = (1.0f64, 0.0f64);
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        for _ in 0..20 {
            let g = theta + mu * vel;
            vel = mu * vel - lr * g;
            theta += vel;
            let la = lookahead(&p, &v, mu);
            nesterov_update(&mut p, &mut v, &la, lr, mu).unwrap();
            assert!((p[0] - theta).abs() < 1e-15);
        }
    }

    fn small_config(strategy: WeightingStrategy) -> TrainConfig {
        TrainConfig {
            steps: 50,
            learning_rate: 1e-2,
            batch_size: 16,
            strategy,
            ..Default::default()
        }
    }

    #[test]
    fn snapshots_match_shorter_runs() {
        let data = gen_toy(0);
        let init = MlpModel::seeded(&[2, 5, 2], Activation::Tanh, 1).unwrap();
        let strategy = WeightingStrategy::GradTail(GradTailConfig::default());
        let long = TrainConfig { steps: 12, snapshot_every: 5, ..small_config(strategy.clone()) };
        let out = train(&data, &init, &long).unwrap();
        assert_eq!(out.snapshots.iter().map(|s| s.steps_done).collect::<Vec<_>>(), vec![5, 10]);
        let short = train(&data, &init, &TrainConfig { steps: 10, ..small_config(strategy) }).unwrap();
        assert_eq!(out.snapshots[1].model.flat_params(), short.model.flat_params());
        assert_eq!(out.snapshots[1].gradtail_state, short.gradtail_state);
    }

    #[test]
    fn zero_steps_returns_init() {
        let data = gen_toy(0);
        let init = MlpModel::seeded(&[2, 5, 2], Activation::Tanh, 1).unwrap();
        let cfg = TrainConfig { steps: 0, ..small_config(WeightingStrategy::Uniform) };
        let out = train(&data, &init, &cfg).unwrap();
        assert_eq!(out.model, init);
        assert!(out.log.is_empty());
    }

    #[test]
    fn traces_conserve_occurrences() {
        let data = gen_toy(0);
        let init = MlpModel::seeded(&[2, 5, 2], Activation::Tanh, 1).unwrap();
        let cfg = small_config(WeightingStrategy::GradTail(GradTailConfig::default()));
        let out = train(&data, &init, &cfg).unwrap();
        let total: usize = out.traces.iter().map(|t| t.occurrences).sum();
        assert_eq!(total, 50 * 16);
        for t in out.traces.iter().filter(|t| t.occurrences > 0) {
            let m = t.mean_theta().unwrap();
            assert!((-1.0..=1.0).contains(&m));
        }
        assert_eq!(out.gradtail_state.updates_seen, 50);
    }

    #[test]
    fn batch_larger_than_data_rejected() {
        let data = gen_toy(0);
        let init = MlpModel::seeded(&[2, 5, 2], Activation::Tanh, 1).unwrap();
        let cfg = TrainConfig { batch_size: 20_000, ..small_config(WeightingStrategy::Uniform) };
        assert!(matches!(train(&data, &init, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn non_finite_loss_aborts_with_snapshot() {
        let data = gen_toy(0);
        let init = MlpModel::seeded(&[2, 5, 2], Activation::Tanh, 1).unwrap();
        let cfg = TrainConfig { learning_rate: f64::MAX, ..small_config(WeightingStrategy::Uniform) };
        match train(&data, &init, &cfg) {
            Err(Error::NumericalAbort { step, snapshot, .. }) => {
                assert!(step > 0);
                assert_eq!(snapshot.layer_dims(), &[2, 5, 2]);
            }
            Ok(_) => panic!("expected abort, training finished"),
            Err(e) => panic!("expected abort, got {e}"),
        }
    }

    #[test]
    fn config_record_round_trip() {
        let cfg = TrainConfig {
            strategy: WeightingStrategy::Focal { gamma: 2.0 },
            ..Default::default()
        };
        let mut r = Record::default();
        cfg.write_into(&mut r, "train");
        assert_eq!(TrainConfig::read_from(&r, "train", &TrainConfig::default()).unwrap(), cfg);
        let dense = DenseTrainConfig::default();
        let mut r = Record::default();
        dense.write_into(&mut r, "dense");
        assert_eq!(
            DenseTrainConfig::read_from(&r, "dense", &DenseTrainConfig::default()).unwrap(),
            dense
        );
    }

    #[test]
    fn dense_step_has_seven_regions() {
        let grid = crate::data::gen_dense_task(2, 64, 64, 0.05).unwrap();
        let init = MlpModel::seeded(&[3, 8, 8, 1], Activation::Tanh, 0).unwrap();
        let cfg = DenseTrainConfig { steps: 3, ..Default::default() };
        let out = train_dense(std::slice::from_ref(&grid), &init, &cfg).unwrap();
        for step in 0..3 {
            let n = out.patch_traces.iter().filter(|t| t.step == step).count();
            // 6 rectangles on a 64x64 grid with sides >= 20 rarely cover it all.
            assert!(n == 6 || n == 7);
        }
        let focal = DenseTrainConfig { strategy: WeightingStrategy::Focal { gamma: 2.0 }, ..cfg };
        assert!(train_dense(std::slice::from_ref(&grid), &init, &focal).is_err());
    }
}
