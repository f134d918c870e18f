//! Standard experiment protocols shared by the command-line driver and the
//! test suites. A toy run with seed `s` uses `s` for the data, the model
//! initialization and batch sampling.

use crate::analysis::{dense_band_mre, BandMre};
use crate::data::{gen_dense_task, gen_hard_variant, gen_toy, DenseGrid, Dataset2D};
use crate::error::{Error, Result};
use crate::nn::{Activation, MlpModel};
use crate::train::{predict_dense, train, train_dense, DenseOutcome, DenseTrainConfig, TrainConfig, TrainOutcome};

pub const TOY_LAYERS: [usize; 3] = [2, 5, 2];
/// Dense band edges: near, middle and the rare far band.
pub const DENSE_BAND_EDGES: [f64; 4] = [0.0, 20.0, 40.0, 60.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyVariant {
    Standard,
    Hard,
}

impl ToyVariant {
    pub fn name(self) -> &'static str {
        match self {
            ToyVariant::Standard => "toy",
            ToyVariant::Hard => "toy_hard",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(ToyVariant::Standard),
            "toy_hard" => Ok(ToyVariant::Hard),
            other => Err(Error::InvalidConfig(format!("unknown toy variant `{other}`"))),
        }
    }

    pub fn dataset(self, seed: u64) -> Dataset2D {
        match self {
            ToyVariant::Standard => gen_toy(seed),
            ToyVariant::Hard => gen_hard_variant(seed),
        }
    }
}

pub fn toy_init(model_seed: u64) -> MlpModel {
    MlpModel::seeded(&TOY_LAYERS, Activation::Tanh, model_seed).expect("toy layer dims are valid")
}

/// Trains on `data` from the seeded toy initialization. `config.batch_seed`
/// is used as given.
pub fn toy_run_on(data: &Dataset2D, model_seed: u64, config: &TrainConfig) -> Result<TrainOutcome> {
    train(data, &toy_init(model_seed), config)
}

/// One seed of the toy protocol: data, model and batch streams all use `seed`.
pub fn toy_run(variant: ToyVariant, seed: u64, config: &TrainConfig) -> Result<(Dataset2D, TrainOutcome)> {
    let data = variant.dataset(seed);
    let config = TrainConfig {
        batch_seed: seed,
        ..config.clone()
    };
    let outcome = toy_run_on(&data, seed, &config)?;
    Ok((data, outcome))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseSetup {
    pub height: usize,
    pub width: usize,
    pub rare_fraction: f64,
    pub train_images: usize,
    pub eval_images: usize,
    pub hidden: usize,
}

impl Default for DenseSetup {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            rare_fraction: 0.05,
            train_images: 4,
            eval_images: 2,
            hidden: 16,
        }
    }
}

impl DenseSetup {
    /// Training grids use data seeds `1000·seed + k`; held-out grids
    /// `1000·seed + 500 + k`.
    pub fn grids(&self, seed: u64) -> Result<(Vec<DenseGrid>, Vec<DenseGrid>)> {
        if self.train_images == 0 || self.eval_images == 0 || self.train_images > 500 || self.eval_images > 500 {
            return Err(Error::InvalidConfig("image counts must lie in 1..=500".into()));
        }
        let make = |offset: u64, count: usize| {
            (0..count as u64)
                .map(|k| gen_dense_task(seed * 1000 + offset + k, self.height, self.width, self.rare_fraction))
                .collect::<Result<Vec<_>>>()
        };
        Ok((make(0, self.train_images)?, make(500, self.eval_images)?))
    }

    pub fn init(&self, model_seed: u64) -> Result<MlpModel> {
        MlpModel::seeded(&[3, self.hidden, self.hidden, 1], Activation::Tanh, model_seed)
    }
}

/// Held-out band errors of a dense model.
pub fn dense_eval(model: &MlpModel, grids: &[DenseGrid]) -> Result<BandMre> {
    let (mut predictions, mut targets, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for g in grids {
        predictions.extend(predict_dense(model, g)?);
        targets.extend_from_slice(&g.targets);
        mask.extend_from_slice(&g.mask);
    }
    dense_band_mre(&predictions, &targets, &mask, &DENSE_BAND_EDGES)
}

/// One seed of the dense protocol. `config.batch_seed` is replaced by `seed`.
pub fn dense_run(setup: &DenseSetup, seed: u64, config: &DenseTrainConfig) -> Result<(DenseOutcome, BandMre)> {
    let (train_grids, eval_grids) = setup.grids(seed)?;
    let config = DenseTrainConfig {
        batch_seed: seed,
        ..config.clone()
    };
    let outcome = train_dense(&train_grids, &setup.init(seed)?, &config)?;
    let mre = dense_eval(&outcome.model, &eval_grids)?;
    Ok((outcome, mre))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names() {
        for v in [ToyVariant::Standard, ToyVariant::Hard] {
            assert_eq!(ToyVariant::from_name(v.name()).unwrap(), v);
        }
        assert!(ToyVariant::from_name("dense").is_err());
    }

    #[test]
    fn short_dense_run_reports_bands() {
        let setup = DenseSetup {
            height: 24,
            width: 24,
            train_images: 1,
            eval_images: 1,
            hidden: 4,
            ..Default::default()
        };
        let cfg = DenseTrainConfig {
            steps: 3,
            ..Default::default()
        };
        let (out, mre) = dense_run(&setup, 1, &cfg).unwrap();
        assert_eq!(out.log.len(), 3);
        assert_eq!(mre.bands.len(), 3);
        assert_eq!(mre.bands[1], None);
        assert!(mre.total.unwrap() > 0.0);
    }
}
