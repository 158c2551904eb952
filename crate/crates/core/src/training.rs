//! Seeded training plumbing shared by both stages.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Named random streams derived from one master seed.
pub mod stream {
    pub const INIT_AE: u64 = 1;
    pub const INIT_LDM: u64 = 2;
    pub const DATA: u64 = 3;
    pub const TRAIN_AE: u64 = 4;
    pub const TRAIN_LDM: u64 = 5;
    pub const SIZES: u64 = 6;
    pub const CHECK: u64 = 7;
    /// Molecule `i` of a sampling run uses stream `SAMPLE_BASE + i`.
    pub const SAMPLE_BASE: u64 = 1 << 32;
}

/// ChaCha stream `id` of the master seed. Streams never overlap, so results do
/// not depend on the order in which they are consumed.
pub fn rng_stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of the run, at its end, over which the learning rate falls
    /// linearly to zero. `0` keeps it constant.
    #[serde(default)]
    pub lr_decay: f64,
}

impl TrainConfig {
    /// Learning rate used for update `it` (zero-based).
    pub fn lr_at(&self, it: usize) -> f64 {
        let span = (self.lr_decay.clamp(0.0, 1.0) * self.iterations as f64).round() as usize;
        let start = self.iterations - span;
        if span == 0 || it < start {
            return self.lr;
        }
        self.lr * (self.iterations - it) as f64 / (span + 1) as f64
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 32,
            lr: 1e-4,
            seed: 0,
            lr_decay: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct Trained<M> {
    pub model: M,
    pub log: Vec<LossRecord>,
}

/// A run stopped by a non-finite loss or gradient. `last_good` holds the
/// parameters from before the failing update.
#[derive(Debug)]
pub struct Aborted<M> {
    pub last_good: M,
    pub log: Vec<LossRecord>,
    pub iteration: usize,
    pub error: Error,
}

impl<M> From<Aborted<M>> for Error {
    fn from(a: Aborted<M>) -> Self {
        Error::NonFinite(format!(
            "training aborted at iteration {}: {}",
            a.iteration, a.error
        ))
    }
}

pub type TrainResult<M> = std::result::Result<Trained<M>, Box<Aborted<M>>>;

/// Indices of one minibatch, sorted so batches are reproducible regardless of
/// how the sampler orders them.
pub fn minibatch(rng: &mut ChaCha8Rng, len: usize, batch: usize) -> Vec<usize> {
    if batch >= len {
        return (0..len).collect();
    }
    let mut idx = index::sample(rng, len, batch).into_vec();
    idx.sort_unstable();
    idx
}

/// Mean loss over the first and last `frac` of a log.
pub fn head_tail_means(log: &[LossRecord], frac: f64) -> Option<(f64, f64)> {
    let n = ((log.len() as f64) * frac).ceil() as usize;
    if n == 0 || log.is_empty() {
        return None;
    }
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&log[..n]), mean(&log[log.len() - n..])))
}
