//! Seeded random streams.
//!
//! Every consumer draws from its own ChaCha stream, selected by a purpose id,
//! so adding draws in one place never shifts another. ChaCha is counter based
//! and platform independent, which keeps generated data reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream purposes. Values are part of the reproducibility contract.
pub mod purpose {
    pub const COMMON_CLASS: u64 = 1;
    pub const UNCOMMON_CLASS: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const BATCH_SAMPLING: u64 = 4;
    pub const PATCH_SAMPLING: u64 = 5;
    pub const DENSE_TASK: u64 = 6;
    pub const DENSE_MASK: u64 = 7;
}

pub fn stream(seed: u64, purpose: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Box–Muller standard normal sampler. Caches the second variate of each pair.
#[derive(Debug, Clone, Default)]
pub struct NormalSampler {
    spare: Option<f64>,
}

impl NormalSampler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] so ln(u1) is finite.
        let u1 = 1.0 - rng.gen::<f64>();
        let u2 = rng.gen::<f64>();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}
