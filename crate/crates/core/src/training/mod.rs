//! Training for the five model configurations at desk scale: AdamW with
//! decoupled weight decay, linear warmup plus stepped decay, label smoothing
//! for sequence classification, random UNK replacement, and early stopping
//! that restores the best-validation weights.

pub mod optimizer;
pub mod schedule;
pub mod synth;
pub mod trainer;

use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::numerics::NumericsError;

pub use optimizer::AdamW;
pub use schedule::lr_at_epoch;
pub use synth::{synth_generate, SynthTask};
pub use trainer::{evaluate, macro_f1, token_accuracy, train, train_with_initial, EpochStats, TrainData, TrainReport};

/// Default experiment seed.
pub const DEFAULT_SEED: u64 = 42119392;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("non-finite gradient in parameter `{name}` (aborting)")]
    BadGradient { name: String },
    #[error("parameter `{name}` has no gradient")]
    MissingGradient { name: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Optimizer and schedule hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Applied to sequence classification only.
    pub label_smoothing: f64,
    /// Probability of replacing a training token with UNK.
    pub unk_prob: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            patience: 10,
            base_lr: 1e-4,
            warmup_epochs: 5,
            decay_epochs: vec![30, 40, 45],
            decay_factor: 0.5,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            label_smoothing: 0.1,
            unk_prob: 0.02,
            batch_size: 32,
            seed: DEFAULT_SEED,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(TrainError::InvalidConfig(format!(
                "warmup ({}) must be shorter than training ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        for (name, p) in [
            ("label_smoothing", self.label_smoothing),
            ("unk_prob", self.unk_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TrainError::InvalidConfig(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(TrainError::InvalidConfig("base_lr must be positive".into()));
        }
        Ok(())
    }
}
