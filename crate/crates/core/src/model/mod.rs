//! A small deterministic encoder-decoder transformer.
//!
//! The decoder's cross-attention runs in reverse query-key form: context rows are
//! the scale-free RMS-normalized encoder states `k̄`, shared by every layer and
//! head, and each head lifts its rotated query into `R^d` before scoring. The
//! lifted queries at chosen positions can be exposed for retrieval scoring.

pub mod attention;
pub mod backward;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod ops;
pub mod rqwk;
pub mod weights;

pub use backward::QueryTape;
pub use config::{ModelConfig, BOS_TOKEN, EOS_TOKEN, FIRST_CONTENT_TOKEN, PAD_TOKEN, SEP_TOKEN};
pub use decoder::{
    argmax_lowest, CrossAttnPath, CrossContext, DecodeSession, DecoderOutput, ExposedQueries,
    ForwardMode,
};
pub use encoder::EncoderOutput;
pub use ops::{rms_norm, rope_apply, Rope};
pub use rqwk::{reverse_qwk_transform, standard_keys};
pub use weights::{ModelWeights, WeightInit};

use crate::error::{IntraError, Result};
use crate::tensor::Matrix;
use attention::HeadLayout;

/// Configuration, frozen weights and the rotary table.
///
/// Immutable after construction; every forward pass borrows it read-only.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
    rope: Rope,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        if !weights.is_finite() {
            return Err(IntraError::NonFinite("model weights".into()));
        }
        let rope = Rope::new(config.d_h, config.max_positions, config.rope_theta)?;
        Ok(Self {
            config,
            weights,
            rope,
        })
    }

    /// Seeded random model with the given config.
    pub fn random(config: ModelConfig, init: &WeightInit) -> Result<Self> {
        let weights = ModelWeights::init(&config, init)?;
        Self::new(config, weights)
    }

    #[inline]
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    #[inline]
    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub(crate) fn head_layout(&self) -> HeadLayout {
        HeadLayout {
            n_h: self.config.n_h,
            n_kv: self.config.n_kv,
            d_h: self.config.d_h,
            scale: self.config.attn_scale(),
        }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(IntraError::TokenOutOfRange {
                token: t,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Token-table rows for `tokens`.
    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        Ok(self.weights.embed.select_rows(&idx))
    }
}
