//! Training, inference, metrics and persistence.

pub mod checkpoint;
pub mod infer;
pub mod metrics;
pub mod optim;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_init: f64,
    /// Length of the learning-rate schedule, in epochs.
    pub max_epoch: u64,
    pub steps_per_epoch: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Training crop `(D, W, H)`.
    pub patch: [usize; 3],
    /// Sliding window `(D, W, H)` for validation and inference.
    pub window: [usize; 3],
    /// Validate every this many epochs (and after the last); 0 only after the last.
    pub val_every: u64,
    /// Random flips along each axis during training.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 2e-4,
            max_epoch: 300,
            steps_per_epoch: 1,
            batch_size: 2,
            weight_decay: 1e-2,
            seed: 0,
            patch: [16, 48, 48],
            window: [16, 64, 64],
            val_every: 0,
            flip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epoch == 0 || self.steps_per_epoch == 0 {
            return Err(Error::config("batch_size, max_epoch and steps_per_epoch must be >= 1"));
        }
        if !(self.lr_init > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("lr_init must be positive and weight_decay non-negative"));
        }
        if self.patch.contains(&0) || self.window.contains(&0) {
            return Err(Error::config("patch and window extents must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.max_epoch * self.steps_per_epoch
    }
}
