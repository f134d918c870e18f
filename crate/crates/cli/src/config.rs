//! Experiment configuration: a flat key-value file with dotted keys. A run
//! manifest written by `train` is itself a valid configuration.
//!
//! ```text
//! experiment.kind = toy            # toy | toy_hard | dense_demo
//! experiment.model_seeds = 0,1,2
//! experiment.data_seeds = 0,1,2    # optional; one value is shared
//! experiment.out = out
//! train.steps = 10000              # toy training keys
//! dense.steps = 1500               # dense training keys
//! dense_task.height = 64           # dense task shape
//! grid.0.name = uniform            # strategy grid
//! grid.1.name = gradtail
//! grid.1.gradtail.max_weight = 15
//! sweep.param = max_weight
//! sweep.values = 5,15,25
//! ```

use std::path::{Path, PathBuf};

use gradtail_core::baselines::{FrequencyWeights, WeightingStrategy};
use gradtail_core::experiment::{DenseSetup, ToyVariant};
use gradtail_core::gradtail::{amplitude_for_max_weight, GradTailConfig};
use gradtail_core::nn::Execution;
use gradtail_core::record::Record;
use gradtail_core::train::{DenseTrainConfig, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Toy(ToyVariant),
    Dense,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Toy(v) => v.name(),
            Kind::Dense => "dense_demo",
        }
    }

    pub fn from_name(name: &str) -> CliResult<Self> {
        match name {
            "dense_demo" => Ok(Kind::Dense),
            other => ToyVariant::from_name(other)
                .map(Kind::Toy)
                .map_err(|_| CliError::Config(format!("unknown experiment kind `{other}` (expected toy, toy_hard or dense_demo)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub label: String,
    pub strategy: WeightingStrategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Pivot,
    MaxWeight,
    InverseFrequencyW,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Pivot => "pivot",
            SweepParam::MaxWeight => "max_weight",
            SweepParam::InverseFrequencyW => "inverse_frequency_w",
        }
    }

    pub fn from_name(name: &str) -> CliResult<Self> {
        match name {
            "pivot" => Ok(SweepParam::Pivot),
            "max_weight" => Ok(SweepParam::MaxWeight),
            "inverse_frequency_w" => Ok(SweepParam::InverseFrequencyW),
            other => Err(CliError::Config(format!(
                "unknown sweep parameter `{other}` (expected pivot, max_weight or inverse_frequency_w)"
            ))),
        }
    }

    /// The strategy this parameter belongs to.
    pub fn strategy_name(self) -> &'static str {
        match self {
            SweepParam::Pivot | SweepParam::MaxWeight => "gradtail",
            SweepParam::InverseFrequencyW => "inverse_frequency",
        }
    }

    /// `base` with this parameter set to `value`. `base` must be the
    /// matching strategy.
    pub fn apply(self, base: &WeightingStrategy, value: f64) -> CliResult<WeightingStrategy> {
        let strategy = match (self, base) {
            (SweepParam::Pivot, WeightingStrategy::GradTail(c)) => {
                WeightingStrategy::GradTail(GradTailConfig { pivot: value, ..*c })
            }
            (SweepParam::MaxWeight, WeightingStrategy::GradTail(c)) => WeightingStrategy::GradTail(GradTailConfig {
                amplitude: amplitude_for_max_weight(value),
                ..*c
            }),
            (SweepParam::InverseFrequencyW, WeightingStrategy::InverseFrequency(_)) => {
                WeightingStrategy::InverseFrequency(FrequencyWeights::two_class(value)?)
            }
            (param, other) => {
                return Err(CliError::Config(format!(
                    "sweep parameter `{}` does not apply to strategy `{}`",
                    param.name(),
                    other.name()
                )))
            }
        };
        if let WeightingStrategy::GradTail(c) = &strategy {
            c.validate()?;
        }
        Ok(strategy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: Kind,
    /// Paired with `data_seeds` by position.
    pub model_seeds: Vec<u64>,
    pub data_seeds: Vec<u64>,
    pub train: TrainConfig,
    pub dense: DenseTrainConfig,
    pub dense_setup: DenseSetup,
    /// Empty means the single strategy in `train` or `dense`.
    pub grid: Vec<GridEntry>,
    pub out: PathBuf,
    pub sweep: Option<SweepSpec>,
    /// Full serial execution, including across runs.
    pub reference_mode: bool,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<u64>,
    pub reference_mode: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: Kind::Toy(ToyVariant::Standard),
            model_seeds: vec![0],
            data_seeds: vec![0],
            train: TrainConfig::default(),
            dense: DenseTrainConfig::default(),
            dense_setup: DenseSetup::default(),
            grid: Vec::new(),
            out: PathBuf::from("out"),
            sweep: None,
            reference_mode: false,
        }
    }
}

fn is_safe_label(label: &str) -> bool {
    !label.is_empty()
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '='))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_record(&Record::parse(&text)?)
    }

    pub fn from_record(record: &Record) -> CliResult<Self> {
        let d = Self::default();
        let kind = match record.get("experiment.kind") {
            Some(k) => Kind::from_name(k)?,
            None => d.kind,
        };
        let model_seeds: Vec<u64> = match record.get("experiment.model_seeds") {
            Some(_) => record.parse_list("experiment.model_seeds")?,
            None => d.model_seeds,
        };
        let data_seeds: Vec<u64> = match record.get("experiment.data_seeds") {
            Some(_) => record.parse_list("experiment.data_seeds")?,
            None => model_seeds.clone(),
        };
        let train = TrainConfig::read_from(record, "train", &d.train)?;
        let dense = DenseTrainConfig::read_from(record, "dense", &d.dense)?;
        let dense_setup = DenseSetup {
            height: record.parse_or("dense_task.height", d.dense_setup.height)?,
            width: record.parse_or("dense_task.width", d.dense_setup.width)?,
            rare_fraction: record.parse_or("dense_task.rare_fraction", d.dense_setup.rare_fraction)?,
            train_images: record.parse_or("dense_task.train_images", d.dense_setup.train_images)?,
            eval_images: record.parse_or("dense_task.eval_images", d.dense_setup.eval_images)?,
            hidden: record.parse_or("dense_task.hidden", d.dense_setup.hidden)?,
        };
        let grid = read_grid(record)?;
        let out = record.get("experiment.out").map(PathBuf::from).unwrap_or(d.out);
        let sweep = match record.get("sweep.param") {
            Some(p) => Some(SweepSpec {
                param: SweepParam::from_name(p)?,
                values: record.parse_list("sweep.values")?,
            }),
            None => None,
        };
        let mut config = Self {
            kind,
            model_seeds,
            data_seeds,
            train,
            dense,
            dense_setup,
            grid,
            out,
            sweep,
            reference_mode: false,
        };
        config.pair_seeds()?;
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, overrides: &Overrides) -> CliResult<()> {
        if let Some(out) = &overrides.out {
            self.out = out.clone();
        }
        if let Some(n) = overrides.seeds {
            self.model_seeds = (0..n).collect();
            self.data_seeds = self.model_seeds.clone();
        }
        if overrides.reference_mode {
            self.reference_mode = true;
            self.train.execution = Execution::Serial;
            self.dense.execution = Execution::Serial;
        }
        self.validate()
    }

    fn pair_seeds(&mut self) -> CliResult<()> {
        match (self.model_seeds.len(), self.data_seeds.len()) {
            (m, d) if m == d => Ok(()),
            (m, 1) => {
                self.data_seeds = vec![self.data_seeds[0]; m];
                Ok(())
            }
            (m, d) => Err(CliError::Config(format!(
                "{d} data seeds cannot be paired with {m} model seeds (give one or the same number)"
            ))),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.model_seeds.is_empty() {
            return Err(CliError::Config("at least one seed is required".into()));
        }
        if self.model_seeds.len() != self.data_seeds.len() {
            return Err(CliError::Config("data and model seed lists differ in length".into()));
        }
        for entry in &self.grid {
            self.check_strategy(&entry.strategy)?;
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(CliError::Config("sweep needs at least one value".into()));
            }
        }
        Ok(())
    }

    /// Rejects strategies the experiment kind cannot train.
    pub fn check_strategy(&self, strategy: &WeightingStrategy) -> CliResult<()> {
        match self.kind {
            Kind::Toy(_) => TrainConfig {
                strategy: strategy.clone(),
                ..self.train.clone()
            }
            .validate()?,
            Kind::Dense => DenseTrainConfig {
                strategy: strategy.clone(),
                ..self.dense.clone()
            }
            .validate()?,
        }
        Ok(())
    }

    /// The configured grid, or the single strategy from the training keys.
    pub fn effective_grid(&self) -> Vec<GridEntry> {
        if !self.grid.is_empty() {
            return self.grid.clone();
        }
        let strategy = match self.kind {
            Kind::Toy(_) => self.train.strategy.clone(),
            Kind::Dense => self.dense.strategy.clone(),
        };
        vec![GridEntry {
            label: strategy.name().to_string(),
            strategy,
        }]
    }

    /// Seed pairs as `(data_seed, model_seed)`.
    pub fn seed_pairs(&self) -> Vec<(u64, u64)> {
        self.data_seeds.iter().copied().zip(self.model_seeds.iter().copied()).collect()
    }

    /// Manifest for a single run. Reading it back with
    /// [`ExperimentConfig::from_record`] reproduces the run.
    pub fn run_manifest(&self, label: &str, strategy: &WeightingStrategy, data_seed: u64, model_seed: u64) -> Record {
        let mut r = Record::new("run-manifest");
        r.set("experiment.kind", self.kind.name());
        r.set("experiment.code_version", env!("CARGO_PKG_VERSION"));
        r.set("experiment.data_seeds", data_seed);
        r.set("experiment.model_seeds", model_seed);
        r.set("grid.0.label", label);
        strategy.write_into(&mut r, "grid.0");
        match self.kind {
            Kind::Toy(_) => TrainConfig {
                strategy: strategy.clone(),
                batch_seed: model_seed,
                ..self.train.clone()
            }
            .write_into(&mut r, "train"),
            Kind::Dense => {
                DenseTrainConfig {
                    strategy: strategy.clone(),
                    batch_seed: model_seed,
                    ..self.dense.clone()
                }
                .write_into(&mut r, "dense");
                let s = &self.dense_setup;
                r.set("dense_task.height", s.height);
                r.set("dense_task.width", s.width);
                r.set("dense_task.rare_fraction", s.rare_fraction);
                r.set("dense_task.train_images", s.train_images);
                r.set("dense_task.eval_images", s.eval_images);
                r.set("dense_task.hidden", s.hidden);
            }
        }
        r
    }
}

fn read_grid(record: &Record) -> CliResult<Vec<GridEntry>> {
    let mut indices: Vec<usize> = Vec::new();
    for key in record.keys() {
        if let Some(rest) = key.strip_prefix("grid.") {
            if let Some((idx, "name")) = rest.split_once('.') {
                let k = idx
                    .parse()
                    .map_err(|_| CliError::Config(format!("grid index in `{key}` is not a number")))?;
                indices.push(k);
            }
        }
    }
    indices.sort_unstable();
    let mut grid: Vec<GridEntry> = Vec::new();
    for k in indices {
        let prefix = format!("grid.{k}");
        let strategy = WeightingStrategy::read_from(record, &prefix)?;
        let mut label = record
            .get(&format!("{prefix}.label"))
            .map(str::to_string)
            .unwrap_or_else(|| strategy.name().to_string());
        if !is_safe_label(&label) {
            return Err(CliError::Config(format!(
                "grid label `{label}` may only use letters, digits, `_`, `-`, `.` and `=`"
            )));
        }
        if grid.iter().any(|g| g.label == label) {
            label = format!("{label}-{k}");
        }
        grid.push(GridEntry { label, strategy });
    }
    Ok(grid)
}
