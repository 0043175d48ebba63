use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and seed of a model. Two models built from equal configs carry
/// bit-identical weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub max_positions: usize,
    pub weight_seed: u64,
}

impl ModelConfig {
    /// The 2-layer, 64-wide configuration used throughout the test suite.
    pub fn tiny(weight_seed: u64) -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            head_dim: 16,
            vocab_size: 256,
            rope_base: 10_000.0,
            max_positions: 2048,
            weight_seed,
        }
    }

    /// Same as [`ModelConfig::tiny`] but with room for the control tokens.
    pub fn tiny_with_controls(weight_seed: u64) -> Self {
        Self { vocab_size: crate::model::tokenizer::VOCAB_WITH_CONTROLS, ..Self::tiny(weight_seed) }
    }

    /// Shape used by the throughput benchmark: wide enough that per-token
    /// projection cost dominates attention over a 512-token context.
    pub fn bench(weight_seed: u64) -> Self {
        Self {
            n_layers: 2,
            d_model: 512,
            n_heads: 8,
            head_dim: 64,
            vocab_size: crate::model::tokenizer::VOCAB_WITH_CONTROLS,
            rope_base: 10_000.0,
            max_positions: 2048,
            weight_seed,
        }
    }

    /// Config for backends without attention state: cells carry tokens only.
    pub fn stateless(max_positions: usize) -> Self {
        Self {
            n_layers: 0,
            d_model: 2,
            n_heads: 1,
            head_dim: 2,
            vocab_size: 256,
            rope_base: 10_000.0,
            max_positions,
            weight_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.head_dim == 0 {
            return fail(format!("all dimensions must be positive: {self:?}"));
        }
        if !self.head_dim.is_multiple_of(2) {
            return fail(format!("head_dim must be even, got {}", self.head_dim));
        }
        if self.n_heads * self.head_dim != self.d_model {
            return fail(format!("d_model {} != n_heads {} x head_dim {}", self.d_model, self.n_heads, self.head_dim));
        }
        if self.vocab_size < 256 {
            return fail(format!("vocab_size {} cannot hold the byte alphabet", self.vocab_size));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return fail(format!("rope_base must be positive, got {}", self.rope_base));
        }
        if self.max_positions == 0 {
            return fail("max_positions must be positive".into());
        }
        Ok(())
    }

    /// Estimated KV bytes held by one cell: layers x (K + V) x d_model x f32.
    pub fn kv_bytes_per_cell(&self) -> usize {
        self.n_layers * 2 * self.d_model * 4
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn odd_head_dim_rejected() {
        let cfg = ModelConfig { head_dim: 15, d_model: 60, ..ModelConfig::tiny(1) };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_dims_rejected() {
        let cfg = ModelConfig { n_layers: 0, ..ModelConfig::tiny(1) };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { d_model: 32, ..ModelConfig::tiny(1) };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kv_bytes_formula() {
        let cfg = ModelConfig::tiny(0);
        assert_eq!(cfg.kv_bytes_per_cell(), 2 * 2 * 64 * 4);
    }
}
