use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sharing::SharingConfig;

/// Architecture of an encoder-decoder transformer plus its sharing setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_depth: usize,
    pub dec_depth: usize,
    /// Model width `d`.
    pub width: usize,
    /// FFN hidden size is `ffn_mult * width`.
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    pub heads: usize,
    pub vocab: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_lnorm_eps")]
    pub lnorm_eps: f64,
    #[serde(default)]
    pub sharing: SharingConfig,
}

fn default_ffn_mult() -> usize {
    4
}

fn default_lnorm_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// The 2-2, d=32, h=4, V=64 configuration used for desk-scale experiments.
    pub fn toy() -> Self {
        ModelConfig {
            enc_depth: 2,
            dec_depth: 2,
            width: 32,
            ffn_mult: 4,
            heads: 4,
            vocab: 64,
            dropout: 0.0,
            lnorm_eps: 1e-5,
            sharing: SharingConfig::default(),
        }
    }

    /// Transformer-base at a 32K shared vocabulary.
    pub fn base() -> Self {
        ModelConfig {
            enc_depth: 6,
            dec_depth: 6,
            width: 512,
            ffn_mult: 4,
            heads: 8,
            vocab: 32_000,
            dropout: 0.1,
            lnorm_eps: 1e-5,
            sharing: SharingConfig::default(),
        }
    }

    /// Transformer-big at a 32K shared vocabulary.
    pub fn big() -> Self {
        ModelConfig {
            width: 1024,
            heads: 16,
            dropout: 0.3,
            ..Self::base()
        }
    }

    pub fn with_depths(mut self, enc: usize, dec: usize) -> Self {
        self.enc_depth = enc;
        self.dec_depth = dec;
        self
    }

    pub fn with_sharing(mut self, sharing: SharingConfig) -> Self {
        self.sharing = sharing;
        self
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.width
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("model.width", "must be positive"));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!(
                    "width {} is not divisible by {} heads",
                    self.width, self.heads
                ),
            ));
        }
        if self.ffn_mult == 0 {
            return Err(Error::config("model.ffn_mult", "must be positive"));
        }
        if self.vocab < 4 {
            return Err(Error::config(
                "model.vocab",
                "need at least the 4 reserved tokens",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if !(self.lnorm_eps > 0.0) {
            return Err(Error::config("model.lnorm_eps", "must be positive"));
        }
        self.sharing.validate(self.enc_depth, self.dec_depth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharing::ShareMode;

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            heads: 5,
            ..ModelConfig::toy()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("model.heads"), "{err}");
    }

    #[test]
    fn none_mode_requires_unit_factor() {
        let mut cfg = ModelConfig::toy();
        cfg.sharing.mode = ShareMode::None;
        cfg.sharing.factor = 2;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("model.sharing.factor"), "{err}");
    }

    #[test]
    fn ffn_width_is_four_d() {
        assert_eq!(ModelConfig::base().ffn_hidden(), 2048);
    }
}
