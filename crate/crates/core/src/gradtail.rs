//! GradTail dynamic sample weighting.
//!
//! Each example's loss gradient (over a chosen parameter subset) is compared
//! by cosine similarity against an exponential moving average of the batch
//! mean gradient. The cosine `θ` is normalized by `σ`, a moving average of
//! `|θ|`, and its distance to a pivot `p` is mapped to a weight by a
//! decreasing activation: examples whose normalized cosine sits at the pivot
//! get the largest weight.
//!
//! Within one call to [`GradTailState::step`] the order is fixed:
//!
//! 1. `θᵢ = cos(∇ᵢ, w̃)` against the pre-update average `w̃`
//! 2. `σₓ = mean |θᵢ|`
//! 3. `σ ← λσ + (1−λ)σₓ`
//! 4. `w̃ ← λw̃ + (1−λ)·mean(∇ᵢ)` (unnormalized mean)
//! 5. `qᵢ = f(|θᵢ / max(σ, σ_floor) − p|)` using the updated `σ`

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{ParamSubset, ParamVector};
use crate::record::Record;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradTailConfig {
    pub pivot: f64,
    /// EMA decay `λ` for both `w̃` and `σ`.
    pub decay: f64,
    /// Activation amplitude `A`; the largest weight is `1 + A/2`.
    pub amplitude: f64,
    /// Activation slope `B`.
    pub slope: f64,
    pub sigma_floor: f64,
    pub warmup_batches: u64,
    /// Below this norm a cosine is treated as undefined.
    pub epsilon_norm: f64,
}

impl Default for GradTailConfig {
    fn default() -> Self {
        Self {
            pivot: 0.0,
            decay: 0.99,
            amplitude: 28.0,
            slope: 1.0,
            sigma_floor: 1e-3,
            warmup_batches: 10,
            epsilon_norm: 1e-12,
        }
    }
}

impl GradTailConfig {
    /// Default configuration whose peak weight is `max_weight`.
    pub fn with_max_weight(max_weight: f64) -> Self {
        Self {
            amplitude: amplitude_for_max_weight(max_weight),
            ..Self::default()
        }
    }

    pub fn max_weight(&self) -> f64 {
        1.0 + self.amplitude / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("gradtail decay must lie in (0, 1)");
        }
        // A = 0 is allowed: it turns weighting off while statistics still run.
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return bad("gradtail amplitude must be finite and non-negative");
        }
        if !(self.slope > 0.0 && self.slope.is_finite()) {
            return bad("gradtail slope must be positive");
        }
        if !(self.sigma_floor > 0.0) {
            return bad("gradtail sigma floor must be positive");
        }
        if !(self.epsilon_norm > 0.0) {
            return bad("gradtail epsilon_norm must be positive");
        }
        if !self.pivot.is_finite() {
            return bad("gradtail pivot must be finite");
        }
        Ok(())
    }

    pub fn write_into(&self, record: &mut Record, prefix: &str) {
        record.set(&format!("{prefix}.pivot"), self.pivot);
        record.set(&format!("{prefix}.decay"), self.decay);
        record.set(&format!("{prefix}.amplitude"), self.amplitude);
        record.set(&format!("{prefix}.slope"), self.slope);
        record.set(&format!("{prefix}.sigma_floor"), self.sigma_floor);
        record.set(&format!("{prefix}.warmup_batches"), self.warmup_batches);
        record.set(&format!("{prefix}.epsilon_norm"), self.epsilon_norm);
    }

    /// Reads keys under `prefix`, falling back to defaults for absent ones.
    /// A `max_weight` key, when present and `amplitude` is not, sets `A`.
    pub fn read_from(record: &Record, prefix: &str) -> Result<Self> {
        let d = Self::default();
        let key = |k: &str| format!("{prefix}.{k}");
        let mut amplitude = record.parse_or(&key("amplitude"), d.amplitude)?;
        if record.get(&key("amplitude")).is_none() && record.get(&key("max_weight")).is_some() {
            amplitude = amplitude_for_max_weight(record.parse_value(&key("max_weight"))?);
        }
        let config = Self {
            pivot: record.parse_or(&key("pivot"), d.pivot)?,
            decay: record.parse_or(&key("decay"), d.decay)?,
            amplitude,
            slope: record.parse_or(&key("slope"), d.slope)?,
            sigma_floor: record.parse_or(&key("sigma_floor"), d.sigma_floor)?,
            warmup_batches: record.parse_or(&key("warmup_batches"), d.warmup_batches)?,
            epsilon_norm: record.parse_or(&key("epsilon_norm"), d.epsilon_norm)?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// `A` such that `1 + A/2 = max_weight`.
pub fn amplitude_for_max_weight(max_weight: f64) -> f64 {
    2.0 * (max_weight - 1.0)
}

/// Cosine similarity clamped to `[−1, 1]`; `None` when either norm is below
/// `epsilon_norm`.
pub fn normalized_dot(a: &ParamVector, b: &ParamVector, epsilon_norm: f64) -> Result<Option<f64>> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na < epsilon_norm || nb < epsilon_norm {
        return Ok(None);
    }
    Ok(Some((dot / (na * nb)).clamp(-1.0, 1.0)))
}

/// `1 / (1 + e^{−z})`, evaluated without overflow.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weight for pivot distance `d ≥ 0`: `1 + A·logistic(−B·d)`. Peaks at
/// `1 + A/2` for `d = 0` and decreases towards 1.
pub fn activation_f(distance: f64, amplitude: f64, slope: f64) -> f64 {
    1.0 + amplitude * logistic(-slope * distance)
}

/// One EMA step: `λ·current + (1−λ)·observation`.
pub fn ema(current: f64, observation: f64, decay: f64) -> f64 {
    decay * current + (1.0 - decay) * observation
}

/// Vector form of [`ema`], in place.
pub fn ema_update(current: &mut ParamVector, observation: &ParamVector, decay: f64) -> Result<()> {
    if !current.same_layout(observation) {
        return Err(Error::LayoutMismatch);
    }
    current.scale(decay);
    current.add_scaled(observation, 1.0 - decay)
}

/// Per-example outcome of one GradTail step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchWeighting {
    /// Cosine per example; undefined cosines are stored as 0.
    pub thetas: Vec<f64>,
    pub weights: Vec<f64>,
    pub warmup_active: bool,
}

impl BatchWeighting {
    /// All-ones weighting with the given thetas.
    pub fn uniform(thetas: Vec<f64>) -> Self {
        let weights = vec![1.0; thetas.len()];
        Self {
            thetas,
            weights,
            warmup_active: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradTailState {
    pub ema_grad: ParamVector,
    pub sigma: f64,
    pub updates_seen: u64,
}

impl GradTailState {
    pub fn new(layout: Arc<ParamSubset>) -> Self {
        Self {
            ema_grad: ParamVector::zeros(layout),
            sigma: 0.0,
            updates_seen: 0,
        }
    }

    /// Runs one batch through the five GradTail steps and returns the weights.
    /// The state is left untouched when an error is returned.
    pub fn step(&mut self, grads: &[ParamVector], config: &GradTailConfig) -> Result<BatchWeighting> {
        if grads.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if grads.iter().any(|g| !g.same_layout(&self.ema_grad)) {
            return Err(Error::LayoutMismatch);
        }

        let cosines = grads
            .iter()
            .map(|g| normalized_dot(g, &self.ema_grad, config.epsilon_norm))
            .collect::<Result<Vec<_>>>()?;

        let defined: Vec<f64> = cosines.iter().flatten().map(|t| t.abs()).collect();
        if !defined.is_empty() {
            let sigma_x = defined.iter().sum::<f64>() / defined.len() as f64;
            self.sigma = ema(self.sigma, sigma_x, config.decay);
        }

        let mean_grad = ParamVector::mean(grads)?;
        ema_update(&mut self.ema_grad, &mean_grad, config.decay)?;

        let warmup_active =
            self.updates_seen < config.warmup_batches || cosines.iter().any(Option::is_none);
        self.updates_seen += 1;

        let thetas: Vec<f64> = cosines.iter().map(|c| c.unwrap_or(0.0)).collect();
        let weights = if warmup_active {
            vec![1.0; thetas.len()]
        } else {
            let sigma = self.sigma.max(config.sigma_floor);
            thetas
                .iter()
                .map(|t| {
                    let distance = (t / sigma - config.pivot).abs();
                    activation_f(distance, config.amplitude, config.slope)
                })
                .collect()
        };
        Ok(BatchWeighting {
            thetas,
            weights,
            warmup_active,
        })
    }

    pub fn to_snapshot(&self, config: &GradTailConfig, layer_dims: &[usize]) -> Record {
        let mut record = Record::new("gradtail-state");
        config.write_into(&mut record, "config");
        record.set_list("state.layer_dims", layer_dims);
        record.set("state.subset", self.ema_grad.layout().to_spec());
        record.set_list("state.ema_grad", self.ema_grad.values());
        record.set("state.sigma", self.sigma);
        record.set("state.updates_seen", self.updates_seen);
        record
    }

    pub fn from_snapshot(record: &Record) -> Result<(Self, GradTailConfig)> {
        record.expect_kind("gradtail-state")?;
        let config = GradTailConfig::read_from(record, "config")?;
        let dims: Vec<usize> = record.parse_list("state.layer_dims")?;
        let layout = Arc::new(ParamSubset::from_spec(&dims, record.require("state.subset")?)?);
        let values = record.parse_list("state.ema_grad")?;
        let state = Self {
            ema_grad: ParamVector::from_values(layout, values)?,
            sigma: record.parse_value("state.sigma")?,
            updates_seen: record.parse_value("state.updates_seen")?,
        };
        Ok((state, config))
    }
}

/// Batch mean of `qᵢ·lossᵢ`.
pub fn weighted_loss(losses: &[f64], weighting: &BatchWeighting) -> Result<f64> {
    weighted_mean(losses, &weighting.weights)
}

pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.len() != weights.len() {
        return Err(Error::LengthMismatch(format!(
            "{} losses, {} weights",
            values.len(),
            weights.len()
        )));
    }
    if values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let sum: f64 = values.iter().zip(weights).map(|(l, q)| l * q).sum();
    Ok(sum / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn layout(n: usize) -> Arc<ParamSubset> {
        // A 1-layer model with n outputs and one input has n weights + n biases;
        // select only the weights to get an n-vector.
        Arc::new(ParamSubset::new(&[1, n], &[(0, crate::nn::ParamKind::Weight)]).unwrap())
    }

    fn pv(l: &Arc<ParamSubset>, v: &[f64]) -> ParamVector {
        ParamVector::from_values(Arc::clone(l), v.to_vec()).unwrap()
    }

    #[test]
    fn normalized_dot_examples() {
        let l = layout(2);
        let c = |a: &[f64], b: &[f64]| normalized_dot(&pv(&l, a), &pv(&l, b), 1e-12).unwrap();
        assert_eq!(c(&[1.0, 0.0], &[1.0, 0.0]), Some(1.0));
        assert_eq!(c(&[1.0, 0.0], &[0.0, 1.0]), Some(0.0));
        assert_eq!(c(&[2.0, 0.0], &[-3.0, 0.0]), Some(-1.0));
        assert_eq!(c(&[0.0, 0.0], &[1.0, 0.0]), None);
        let other = layout(3);
        assert!(normalized_dot(&pv(&l, &[1.0, 0.0]), &pv(&other, &[1.0, 0.0, 0.0]), 1e-12).is_err());
    }

    #[test]
    fn activation_examples() {
        assert_eq!(activation_f(0.0, 28.0, 1.0), 15.0);
        assert_eq!(activation_f(0.0, 4.0, 1.0), 3.0);
        assert!(activation_f(50.0, 28.0, 1.0) < 1.0 + 1e-10);
        assert!(activation_f(50.0, 28.0, 1.0) >= 1.0);
        assert_relative_eq!(logistic(-1.0), 0.2689414213699951, epsilon = 1e-15);
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema(0.3, 0.3, 0.99), 0.3);
        assert_eq!(GradTailConfig::default().decay, 0.99);
        assert_eq!(GradTailConfig::default().max_weight(), 15.0);
    }

    #[test]
    fn first_step_is_warmup() {
        let l = layout(2);
        let mut state = GradTailState::new(Arc::clone(&l));
        let config = GradTailConfig { warmup_batches: 0, ..Default::default() };
        let grads = [pv(&l, &[1.0, 2.0]), pv(&l, &[3.0, 0.0])];
        let w = state.step(&grads, &config).unwrap();
        assert!(w.warmup_active);
        assert_eq!(w.weights, vec![1.0, 1.0]);
        assert_eq!(w.thetas, vec![0.0, 0.0]);
        assert_eq!(state.sigma, 0.0);
        let expected = [0.01 * 2.0, 0.01 * 1.0];
        for (a, b) in state.ema_grad.values().iter().zip(expected) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
        assert_eq!(state.updates_seen, 1);
    }

    #[test]
    fn orthogonal_gradient_gets_max_weight() {
        let l = layout(2);
        // Frozen state: w̃ along x, σ chosen so that after the step-3 update it
        // is still 0.5 (σₓ = 0 for an orthogonal gradient, so start at 0.5/λ).
        let config = GradTailConfig { warmup_batches: 0, ..Default::default() };
        let mut state = GradTailState {
            ema_grad: pv(&l, &[1.0, 0.0]),
            sigma: 0.5 / config.decay,
            updates_seen: 100,
        };
        let w = state.step(&[pv(&l, &[0.0, 2.0])], &config).unwrap();
        assert!(!w.warmup_active);
        assert_eq!(w.thetas, vec![0.0]);
        assert_relative_eq!(state.sigma, 0.5, epsilon = 1e-15);
        assert_eq!(w.weights, vec![config.max_weight()]);
    }

    #[test]
    fn parallel_gradient_weight() {
        let l = layout(2);
        // σ must equal 1 after the update with σₓ = 1, so start at 1.
        let config = GradTailConfig {
            amplitude: 4.0,
            slope: 1.0,
            pivot: 0.0,
            warmup_batches: 0,
            ..Default::default()
        };
        let mut state = GradTailState {
            ema_grad: pv(&l, &[0.5, 0.5]),
            sigma: 1.0,
            updates_seen: 100,
        };
        let w = state.step(&[pv(&l, &[2.0, 2.0])], &config).unwrap();
        assert_relative_eq!(w.thetas[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(w.weights[0], 1.0 + 4.0 * 0.2689414213699951, epsilon = 1e-12);
        assert_relative_eq!(w.weights[0], 2.0758, epsilon = 1e-4);
    }

    #[test]
    fn step_errors_leave_state_untouched() {
        let l = layout(2);
        let mut state = GradTailState::new(Arc::clone(&l));
        let before = state.clone();
        let config = GradTailConfig::default();
        assert!(matches!(state.step(&[], &config), Err(Error::EmptyBatch)));
        let other = layout(3);
        let err = state.step(&[pv(&l, &[1.0, 0.0]), pv(&other, &[1.0, 0.0, 0.0])], &config);
        assert!(matches!(err, Err(Error::LayoutMismatch)));
        assert_eq!(state, before);
    }

    #[test]
    fn weighted_loss_examples() {
        let w = BatchWeighting::uniform(vec![0.0; 3]);
        assert_relative_eq!(weighted_loss(&[1.0, 2.0, 6.0], &w).unwrap(), 3.0);
        let w = BatchWeighting { thetas: vec![0.0, 0.0], weights: vec![1.0, 3.0], warmup_active: false };
        assert_eq!(weighted_loss(&[2.0, 4.0], &w).unwrap(), 7.0);
        assert_eq!(weighted_loss(&[0.0, 0.0], &w).unwrap(), 0.0);
        assert!(weighted_loss(&[1.0], &w).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(GradTailConfig { decay: 1.0, ..Default::default() }.validate().is_err());
        assert!(GradTailConfig { slope: 0.0, ..Default::default() }.validate().is_err());
        assert!(GradTailConfig { amplitude: -1.0, ..Default::default() }.validate().is_err());
        assert!(GradTailConfig::with_max_weight(1.0).validate().is_ok());
    }

    #[test]
    fn snapshot_round_trip() {
        let dims = [2, 3, 2];
        let l = Arc::new(ParamSubset::all(&dims).unwrap());
        let mut state = GradTailState::new(Arc::clone(&l));
        let g: Vec<f64> = (0..l.len()).map(|i| (i as f64).sin() / 3.0).collect();
        let config = GradTailConfig::default();
        state.step(&[ParamVector::from_values(Arc::clone(&l), g).unwrap()], &config).unwrap();
        let text = state.to_snapshot(&config, &dims).to_text();
        let (back, back_config) = GradTailState::from_snapshot(&Record::parse(&text).unwrap()).unwrap();
        assert_eq!(back, state);
        assert_eq!(back_config, config);
    }
}
