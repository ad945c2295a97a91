//! Transformer encoder-decoder over utterance sequences.
//!
//! The encoder reads fused utterance features, the decoder reads the
//! emotion distributions of the previous utterances (shifted right behind a
//! learned begin-of-dialogue vector). Every attention layer is causal, and
//! decoder step `n` attends only to encoder positions `<= n`, so the output
//! at step `n` depends on utterances `1..=n` and distributions `1..n`.

mod checkpoint;
mod params;
mod schedule;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{ModelParams, ParamLayout};
pub use schedule::{positional_encoding, scheduled_input, teacher_forcing_ratio, TeacherForcingSchedule};
pub use transformer::{predict_dialogue, BoundModel, DialoguePrediction, Dropout};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub feedforward_dim: usize,
    pub dropout: f64,
    /// Number of emotion classes `K`.
    pub classes: usize,
    /// Per-modality feature width `Q`.
    pub feature_dim: usize,
    /// Low-rank width `D` of the bilinear fusion.
    pub fusion_rank: usize,
    /// Fused vector width `O`, the encoder input.
    pub fusion_dim: usize,
}

impl Default for ModelConfig {
    /// Desk-scale configuration for synthetic corpora.
    fn default() -> Self {
        ModelConfig {
            model_dim: 64,
            encoder_blocks: 2,
            decoder_blocks: 2,
            heads: 2,
            feedforward_dim: 256,
            dropout: 0.1,
            classes: 5,
            feature_dim: 32,
            fusion_rank: 64,
            fusion_dim: 64,
        }
    }
}

impl ModelConfig {
    /// 4+4 blocks of width 256 with 4 heads over 768-dim features.
    pub fn full_size() -> Self {
        ModelConfig {
            model_dim: 256,
            encoder_blocks: 4,
            decoder_blocks: 4,
            heads: 4,
            feedforward_dim: 1024,
            dropout: 0.1,
            classes: 5,
            feature_dim: crate::fusion::FULL_INPUT_DIM,
            fusion_rank: crate::fusion::FULL_RANK,
            fusion_dim: crate::fusion::FULL_OUTPUT_DIM,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.model_dim", self.model_dim),
            ("model.encoder_blocks", self.encoder_blocks),
            ("model.decoder_blocks", self.decoder_blocks),
            ("model.heads", self.heads),
            ("model.feedforward_dim", self.feedforward_dim),
            ("model.classes", self.classes),
            ("model.feature_dim", self.feature_dim),
            ("model.fusion_rank", self.fusion_rank),
            ("model.fusion_dim", self.fusion_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config("model.classes must be at least 2".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.model_dim ({}) must be divisible by model.heads ({})",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}
