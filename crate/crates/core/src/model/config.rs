use serde::{Deserialize, Serialize};

use crate::error::{IntraError, Result};

pub const PAD_TOKEN: u32 = 0;
pub const BOS_TOKEN: u32 = 1;
pub const EOS_TOKEN: u32 = 2;
pub const SEP_TOKEN: u32 = 3;
/// First id available for content tokens.
pub const FIRST_CONTENT_TOKEN: u32 = 4;

/// Dimensions of the encoder-decoder transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Residual width.
    pub d: usize,
    /// Per-head width.
    pub d_h: usize,
    /// Query heads.
    pub n_h: usize,
    /// Key/value heads (grouped-query attention).
    pub n_kv: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Hidden width of the feed-forward blocks.
    pub ffn_dim: usize,
    pub rmsnorm_eps: f64,
    pub rope_theta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            d_h: 8,
            n_h: 4,
            n_kv: 2,
            enc_layers: 2,
            dec_layers: 2,
            vocab_size: 256,
            max_positions: 32_768,
            ffn_dim: 128,
            rmsnorm_eps: 1e-6,
            rope_theta: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_h", self.d_h),
            ("n_h", self.n_h),
            ("n_kv", self.n_kv),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(IntraError::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.n_h.is_multiple_of(self.n_kv) {
            return Err(IntraError::Config(format!(
                "n_h ({}) must be a multiple of n_kv ({})",
                self.n_h, self.n_kv
            )));
        }
        if !self.d_h.is_multiple_of(2) {
            return Err(IntraError::Config(format!(
                "rotary embeddings need an even head dimension, got d_h = {}",
                self.d_h
            )));
        }
        if !(self.rmsnorm_eps > 0.0 && self.rmsnorm_eps.is_finite()) {
            return Err(IntraError::Config("rmsnorm_eps must be positive".into()));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return Err(IntraError::Config("rope_theta must be positive".into()));
        }
        if (self.vocab_size as u64) <= FIRST_CONTENT_TOKEN as u64 {
            return Err(IntraError::Config(
                "vocab_size must leave room for content tokens after the specials".into(),
            ));
        }
        Ok(())
    }

    /// Query heads per key/value head.
    #[inline]
    pub fn n_rep(&self) -> usize {
        self.n_h / self.n_kv
    }

    /// KV group serving query head `h`.
    #[inline]
    pub fn group_of(&self, h: usize) -> usize {
        h / self.n_rep()
    }

    #[inline]
    pub fn attn_scale(&self) -> f64 {
        1.0 / (self.d_h as f64).sqrt()
    }

    #[inline]
    pub fn q_dim(&self) -> usize {
        self.n_h * self.d_h
    }

    #[inline]
    pub fn kv_dim(&self) -> usize {
        self.n_kv * self.d_h
    }
}
