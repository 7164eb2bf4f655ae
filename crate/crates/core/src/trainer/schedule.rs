use crate::error::{Error, Result};

/// Optimization settings for cross-entropy training and RL fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_xe: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub lr_rl: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub lsr: f64,
    pub ss_max: f64,
    /// Epochs for the scheduled-sampling probability to grow by 1.
    pub ss_ramp: f64,
    pub patience_xe: usize,
    pub patience_rl: usize,
    pub max_epochs_xe: usize,
    pub max_epochs_rl: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip: Option<f64>,
    pub max_len: usize,
    /// Build the discriminative branch at all.
    pub discriminative: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_xe: 5e-4,
            lr_decay: 0.8,
            decay_every: 3,
            lr_rl: 5e-5,
            batch_size: 10,
            lambda: 10.0,
            lsr: 0.1,
            ss_max: 0.25,
            ss_ramp: 100.0,
            patience_xe: 10,
            patience_rl: 5,
            max_epochs_xe: 30,
            max_epochs_rl: 10,
            clip: Some(5.0),
            max_len: 16,
            discriminative: true,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_xe", self.lr_xe),
            ("lr_decay", self.lr_decay),
            ("lr_rl", self.lr_rl),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.decay_every == 0 || self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::invalid("decay_every, batch_size and max_len must be positive"));
        }
        if self.patience_xe == 0 || self.patience_rl == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.lsr) {
            return Err(Error::invalid("label smoothing must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ss_max) || !(self.ss_ramp > 0.0) {
            return Err(Error::invalid("scheduled sampling cap must lie in [0, 1] with a positive ramp"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::invalid("clip norm must be positive"));
            }
        }
        Ok(())
    }

    /// `lr_xe · decay^⌊epoch / decay_every⌋`
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_xe * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    /// `min(ss_max, epoch / ss_ramp)`
    pub fn ss_at(&self, epoch: usize) -> f64 {
        self.ss_max.min(epoch as f64 / self.ss_ramp)
    }
}

/// `min(0.25, epoch / 100)`
pub fn ss_probability(epoch: usize) -> f64 {
    0.25f64.min(epoch as f64 / 100.0)
}

/// Learning rate of `cfg` at `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr_at(epoch)
}
