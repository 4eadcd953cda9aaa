use serde::{Deserialize, Serialize};

use crate::encoder::Reduction;
use crate::error::{Error, Result};
use crate::masking::{ExplorationSchedule, DEFAULT_MASK_RATE};

/// How the two objectives are combined into one update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// `encoder + lambda * mapnet`.
    #[default]
    LambdaOnMapnet,
    /// `mapnet + lambda * encoder`.
    LambdaOnEncoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub lambda: f64,
    pub eps_clip: f64,
    pub mask_rate: f64,
    pub schedule: ExplorationSchedule,
    pub seed: u64,
    /// 0 disables evaluation.
    pub eval_interval: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// Plain uniform masking: the proposal net is never run or updated.
    pub baseline_uniform: bool,
    pub loss_form: LossForm,
    pub reduction: Reduction,
    /// Also train the proposal net on uniform-branch sentences.
    pub off_policy_mapnet: bool,
    /// Keep proposal-net gradients out of the shared embedding.
    pub freeze_shared_embedding: bool,
    /// Draw batches with replacement instead of shuffled epochs.
    pub sample_with_replacement: bool,
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn toy() -> Self {
        let total_steps = 10_000;
        Self {
            batch_size: 32,
            total_steps,
            peak_lr: 3e-4,
            warmup_steps: 400,
            adam_betas: (0.9, 0.98),
            adam_eps: 1e-6,
            weight_decay: 0.01,
            dropout: 0.0,
            lambda: 1e-2,
            eps_clip: 0.2,
            mask_rate: DEFAULT_MASK_RATE,
            schedule: ExplorationSchedule::new(total_steps),
            seed: 0,
            eval_interval: 200,
            checkpoint_interval: 0,
            baseline_uniform: false,
            loss_form: LossForm::LambdaOnMapnet,
            reduction: Reduction::Mean,
            off_policy_mapnet: false,
            freeze_shared_embedding: false,
            sample_with_replacement: false,
        }
    }

    /// BERT-base pretraining hyperparameters. Not exercised at desk scale.
    pub fn bert_base() -> Self {
        let total_steps = 1_000_000;
        Self {
            batch_size: 256,
            total_steps,
            peak_lr: 1e-4,
            warmup_steps: 10_000,
            dropout: 0.1,
            schedule: ExplorationSchedule::new(total_steps),
            eval_interval: 10_000,
            checkpoint_interval: 100_000,
            ..Self::toy()
        }
    }

    /// Sets `total_steps` and stretches the exploration schedule to match.
    pub fn with_total_steps(mut self, total_steps: u64) -> Self {
        self.total_steps = total_steps;
        self.schedule.end_step = total_steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return bad("warmup_steps", "must be below total_steps");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr", "must be positive");
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad("mask_rate", "must lie in (0, 1)");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("adam_betas", "must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps", "must be positive");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.eps_clip) {
            return bad("eps_clip", "must lie in [0, 1)");
        }
        self.schedule.validate()
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at
/// `total_steps`.
pub fn lr_at(config: &TrainConfig, step: u64) -> f64 {
    let (w, t) = (config.warmup_steps, config.total_steps);
    if step >= t {
        return 0.0;
    }
    if step < w {
        return config.peak_lr * step as f64 / w as f64;
    }
    config.peak_lr * (t - step) as f64 / (t - w) as f64
}
