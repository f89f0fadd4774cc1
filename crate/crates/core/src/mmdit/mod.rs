//! Miniature joint-attention editing model trained with flow matching.
//!
//! The token sequence is `[Z; X_orig; text]`: `N` noisy image tokens, `N`
//! conditioning image tokens and `T` text tokens. Every block runs one
//! attention over all of them, followed by a feed-forward layer.

mod model;
mod pretrain;
mod sampler;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridShape;

pub use model::{BlockHooks, EditorModel, Hooks, ModelInput};
pub(crate) use pretrain::{mean_squared_error, noisy_latent};
pub use pretrain::{pretrain_base, pretrain_on, PretrainConfig, PretrainReport};
pub use sampler::{euler, initial_noise, sample_edit, sample_with_velocity};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub text_len: usize,
    pub vocab: usize,
    pub grid: GridShape,
    pub ffn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            blocks: 4,
            heads: 4,
            text_len: 24,
            vocab: 16,
            grid: GridShape::default(),
            ffn_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let fields = [
            ("d_model", self.d_model),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("text_len", self.text_len),
            ("vocab", self.vocab),
            ("ffn_hidden", self.ffn_hidden),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be even for the sinusoidal time embedding",
                self.d_model
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Rows in the joint sequence: two image streams plus the text.
    pub fn sequence_len(&self) -> usize {
        2 * self.grid.tokens() + self.text_len
    }

    /// Row offset of the first text token in the joint sequence.
    pub fn text_offset(&self) -> usize {
        2 * self.grid.tokens()
    }
}

/// The linear maps in each block that can carry a low-rank update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
    FfnIn,
    FfnOut,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
        Projection::FfnIn,
        Projection::FfnOut,
    ];

    /// Stable layer key, e.g. `blocks.2.attn.q`.
    pub fn key(self, block: usize) -> String {
        let suffix = match self {
            Projection::Query => "attn.q",
            Projection::Key => "attn.k",
            Projection::Value => "attn.v",
            Projection::Output => "attn.o",
            Projection::FfnIn => "ff.fc1",
            Projection::FfnOut => "ff.fc2",
        };
        format!("blocks.{block}.{suffix}")
    }

    pub fn weight_name(self, block: usize) -> String {
        format!("{}.weight", self.key(block))
    }

    /// `(d_in, d_out)` of the projection.
    pub fn dims(self, config: &ModelConfig) -> (usize, usize) {
        match self {
            Projection::FfnIn => (config.d_model, config.ffn_hidden),
            Projection::FfnOut => (config.ffn_hidden, config.d_model),
            _ => (config.d_model, config.d_model),
        }
    }
}
