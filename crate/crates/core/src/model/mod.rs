//! Transformer encoder variants: standard softmax attention and linear
//! attention in both the parallel (masked cumulative-sum) and recurrent-step
//! forms, with tagging and classification heads.

pub mod checkpoint;
pub mod encoder;
pub mod state;
pub mod weights;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::NumericsError;

pub use encoder::{
    apply_delay_head, delayed_targets, forward_full, forward_on_tape, padded_tokens,
    ForwardOutput, TapedForward, TapedParams,
};
pub use state::{RecurrentState, StepOutput};
pub use weights::ModelWeights;

/// Epsilon inside the layer-norm variance root.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocab of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence of length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("recurrent stepping is only supported for linear attention")]
    UnsupportedMode,
    #[error("classification output requested before any non-padding token")]
    NoRealTokens,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Softmax,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Tagging,
    Classification,
}

/// How a trained encoder is driven at deployment time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeployMode {
    /// Re-run the full forward pass on every input prefix.
    Restart,
    /// Advance the recurrent state one token at a time.
    Recurrent,
}

impl std::fmt::Display for DeployMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DeployMode::Restart => "restart",
            DeployMode::Recurrent => "recurrent",
        })
    }
}

impl std::str::FromStr for DeployMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "restart" => Ok(DeployMode::Restart),
            "recurrent" => Ok(DeployMode::Recurrent),
            other => Err(format!("unknown mode `{other}` (expected restart|recurrent)")),
        }
    }
}

/// Architecture and head hyperparameters for one encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub attention_kind: AttentionKind,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub n_labels: usize,
    pub head_kind: HeadKind,
    pub use_positional: bool,
    pub causal: bool,
    /// Trained output delay: the prediction for token t is read at
    /// position t + delay, with `delay` end-padding tokens appended.
    pub delay: usize,
    pub max_len: usize,
    /// Reserved padding id; never contributes to the classification mean.
    pub pad_id: u32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0 {
            return Err(ModelError::InvalidConfig("n_layers must be >= 1".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.vocab_size == 0 || self.n_labels == 0 {
            return Err(ModelError::InvalidConfig(
                "vocab_size and n_labels must be positive".into(),
            ));
        }
        if self.delay > 2 {
            return Err(ModelError::InvalidConfig(format!(
                "delay {} outside {{0, 1, 2}}",
                self.delay
            )));
        }
        if self.delay > 0 && !self.causal {
            return Err(ModelError::InvalidConfig(
                "delay > 0 is only meaningful for causal models".into(),
            ));
        }
        if self.pad_id as usize >= self.vocab_size {
            return Err(ModelError::InvalidConfig(format!(
                "pad_id {} outside vocab of {}",
                self.pad_id, self.vocab_size
            )));
        }
        if self.max_len == 0 {
            return Err(ModelError::InvalidConfig("max_len must be positive".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Desk-scale defaults; vocabulary/label sizes come from the data.
    pub fn desk_default(vocab_size: usize, n_labels: usize, head_kind: HeadKind) -> Self {
        ModelConfig {
            attention_kind: AttentionKind::Linear,
            n_layers: 2,
            n_heads: 8,
            d_model: 64,
            d_ff: 256,
            dropout: 0.1,
            vocab_size,
            n_labels,
            head_kind,
            use_positional: true,
            causal: true,
            delay: 0,
            max_len: 256,
            pad_id: 0,
        }
    }
}

/// The five model configurations under study, as deployment axes:
/// restart vs. recurrence, causal masking, and trained delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Standard transformer encoder, restart-incremental.
    Baseline,
    /// Linear-attention encoder, restart-incremental.
    Lt,
    /// Linear-attention encoder trained on full sequences, deployed as an RNN.
    LtR,
    /// Linear-attention encoder trained with causal masking, deployed as an RNN.
    LtRCm,
    /// Causally-masked recurrent encoder trained with an output delay of 1.
    LtRCmD1,
    /// Causally-masked recurrent encoder trained with an output delay of 2.
    LtRCmD2,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Baseline,
        ModelKind::Lt,
        ModelKind::LtR,
        ModelKind::LtRCm,
        ModelKind::LtRCmD1,
        ModelKind::LtRCmD2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Lt => "lt",
            ModelKind::LtR => "lt_r",
            ModelKind::LtRCm => "lt_r_cm",
            ModelKind::LtRCmD1 => "lt_r_cm_d1",
            ModelKind::LtRCmD2 => "lt_r_cm_d2",
        }
    }

    pub fn attention(self) -> AttentionKind {
        match self {
            ModelKind::Baseline => AttentionKind::Softmax,
            _ => AttentionKind::Linear,
        }
    }

    /// Whether training restricts attention to the causal prefix.
    pub fn causal_training(self) -> bool {
        matches!(self, ModelKind::LtRCm | ModelKind::LtRCmD1 | ModelKind::LtRCmD2)
    }

    pub fn trained_delay(self) -> usize {
        match self {
            ModelKind::LtRCmD1 => 1,
            ModelKind::LtRCmD2 => 2,
            _ => 0,
        }
    }

    pub fn default_mode(self) -> DeployMode {
        match self {
            ModelKind::Baseline | ModelKind::Lt => DeployMode::Restart,
            _ => DeployMode::Recurrent,
        }
    }

    /// Configuration for this kind over the given vocabulary/label space.
    pub fn configure(self, vocab_size: usize, n_labels: usize, head_kind: HeadKind) -> ModelConfig {
        let mut cfg = ModelConfig::desk_default(vocab_size, n_labels, head_kind);
        cfg.attention_kind = self.attention();
        cfg.causal = self.causal_training();
        cfg.delay = self.trained_delay();
        cfg
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = ModelKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown model kind `{s}` (expected one of: {})", names.join(", "))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_catches_bad_axes() {
        let mut cfg = ModelConfig::desk_default(10, 3, HeadKind::Tagging);
        cfg.validate().unwrap();
        cfg.n_heads = 7;
        assert!(cfg.validate().is_err());
        cfg.n_heads = 8;
        cfg.delay = 3;
        assert!(cfg.validate().is_err());
        cfg.delay = 1;
        cfg.causal = false;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn model_kind_axes_match_table() {
        assert_eq!(ModelKind::Baseline.attention(), AttentionKind::Softmax);
        assert_eq!(ModelKind::Baseline.default_mode(), DeployMode::Restart);
        assert_eq!(ModelKind::Lt.default_mode(), DeployMode::Restart);
        assert!(!ModelKind::LtR.causal_training());
        assert_eq!(ModelKind::LtR.default_mode(), DeployMode::Recurrent);
        assert!(ModelKind::LtRCm.causal_training());
        assert_eq!(ModelKind::LtRCmD1.trained_delay(), 1);
        assert_eq!(ModelKind::LtRCmD2.trained_delay(), 2);
        assert_eq!("lt_r_cm".parse::<ModelKind>().unwrap(), ModelKind::LtRCm);
        let err = "nope".parse::<ModelKind>().unwrap_err();
        assert!(err.contains("baseline") && err.contains("lt_r_cm_d2"));
    }
}
