//! Comparison weighting schemes and per-example scores.

use crate::error::{Error, Result};
use crate::gradtail::GradTailConfig;
use crate::record::Record;

/// Constant per-class weights. Every weight is ≥ 1 and the reference class
/// has weight exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyWeights {
    weights: Vec<f64>,
}

impl FrequencyWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidConfig("frequency table is empty".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "frequency weights must be finite and >= 1, got {weights:?}"
            )));
        }
        if !weights.contains(&1.0) {
            return Err(Error::InvalidConfig(
                "frequency table needs a reference class with weight 1".into(),
            ));
        }
        Ok(Self { weights })
    }

    /// Common class 0 at weight 1, uncommon class 1 at `w`.
    pub fn two_class(uncommon_weight: f64) -> Result<Self> {
        Self::new(vec![1.0, uncommon_weight])
    }

    /// Exact inverse-frequency ratios: the most frequent class gets 1.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.contains(&0) {
            return Err(Error::InvalidConfig("a class has no examples".into()));
        }
        let max = *counts.iter().max().ok_or(Error::EmptyBatch)? as f64;
        Self::new(counts.iter().map(|&c| max / c as f64).collect())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

pub fn inverse_frequency_weight(label: usize, table: &FrequencyWeights) -> Result<f64> {
    table
        .weights
        .get(label)
        .copied()
        .ok_or(Error::UnknownClass(label))
}

fn check_probabilities(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidProbabilities("empty".into()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0 + 1e-12) {
        return Err(Error::InvalidProbabilities(format!("{probs:?}")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidProbabilities(format!("sums to {sum}")));
    }
    Ok(())
}

/// Focal modulation `(1 − p_t)^γ`.
pub fn focal_weight(probs: &[f64], label: usize, gamma: f64) -> Result<f64> {
    check_probabilities(probs)?;
    if !(gamma >= 0.0) {
        return Err(Error::InvalidConfig("focal gamma must be >= 0".into()));
    }
    let p_t = *probs.get(label).ok_or(Error::LabelOutOfRange {
        label,
        classes: probs.len(),
    })?;
    Ok((1.0 - p_t).max(0.0).powf(gamma))
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy_score(probs: &[f64]) -> Result<f64> {
    check_probabilities(probs)?;
    Ok(-probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>())
}

pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;

/// How per-example loss weights are produced during training.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightingStrategy {
    Uniform,
    GradTail(GradTailConfig),
    InverseFrequency(FrequencyWeights),
    Focal { gamma: f64 },
}

impl WeightingStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            WeightingStrategy::Uniform => "uniform",
            WeightingStrategy::GradTail(_) => "gradtail",
            WeightingStrategy::InverseFrequency(_) => "inverse_frequency",
            WeightingStrategy::Focal { .. } => "focal",
        }
    }

    /// The strategy `name` with default settings.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "uniform" => Ok(WeightingStrategy::Uniform),
            "gradtail" => Ok(WeightingStrategy::GradTail(GradTailConfig::default())),
            "inverse_frequency" => Ok(WeightingStrategy::InverseFrequency(
                FrequencyWeights::two_class(25.0)?,
            )),
            "focal" => Ok(WeightingStrategy::Focal {
                gamma: DEFAULT_FOCAL_GAMMA,
            }),
            other => Err(Error::InvalidConfig(format!(
                "unknown strategy `{other}` (expected uniform, gradtail, inverse_frequency or focal)"
            ))),
        }
    }

    /// Writes `{prefix}.name` and the strategy's own keys.
    pub fn write_into(&self, record: &mut Record, prefix: &str) {
        record.set(&format!("{prefix}.name"), self.name());
        match self {
            WeightingStrategy::Uniform => {}
            WeightingStrategy::GradTail(c) => c.write_into(record, &format!("{prefix}.gradtail")),
            WeightingStrategy::InverseFrequency(t) => {
                record.set_list(&format!("{prefix}.class_weights"), t.weights())
            }
            WeightingStrategy::Focal { gamma } => record.set(&format!("{prefix}.gamma"), gamma),
        }
    }

    pub fn read_from(record: &Record, prefix: &str) -> Result<Self> {
        let name = record.require(&format!("{prefix}.name"))?;
        let mut strategy = Self::from_name(name)?;
        match &mut strategy {
            WeightingStrategy::Uniform => {}
            WeightingStrategy::GradTail(c) => {
                *c = GradTailConfig::read_from(record, &format!("{prefix}.gradtail"))?
            }
            WeightingStrategy::InverseFrequency(t) => {
                let key = format!("{prefix}.class_weights");
                if record.get(&key).is_some() {
                    *t = FrequencyWeights::new(record.parse_list(&key)?)?;
                } else if record.get(&format!("{prefix}.w")).is_some() {
                    *t = FrequencyWeights::two_class(record.parse_value(&format!("{prefix}.w"))?)?;
                }
            }
            WeightingStrategy::Focal { gamma } => {
                *gamma = record.parse_or(&format!("{prefix}.gamma"), DEFAULT_FOCAL_GAMMA)?;
                if !(*gamma >= 0.0) {
                    return Err(Error::InvalidConfig("focal gamma must be >= 0".into()));
                }
            }
        }
        Ok(strategy)
    }
}
