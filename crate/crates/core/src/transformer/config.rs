use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the encoder-decoder and its context extensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub dropout: f64,
    pub max_len: usize,
    /// Drop special tokens from the copy distribution and renormalise the
    /// remaining mass.
    pub copy_exclude_special: bool,
}

impl ModelConfig {
    /// Desk-scale default.
    pub fn toy(vocab_src: usize, vocab_tgt: usize) -> Self {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            heads: 2,
            d_ff: 64,
            vocab_src,
            vocab_tgt,
            dropout: 0.1,
            max_len: 128,
            copy_exclude_special: true,
        }
    }

    /// Transformer-base dimensions. Expressible, not exercised.
    pub fn transformer_base() -> Self {
        ModelConfig {
            d_model: 512,
            n_layers: 6,
            heads: 8,
            d_ff: 2048,
            vocab_src: 50_000,
            vocab_tgt: 50_000,
            dropout: 0.1,
            max_len: 512,
            copy_exclude_special: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("vocab_src", self.vocab_src),
            ("vocab_tgt", self.vocab_tgt),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ModelConfig::toy(10, 10).validate().is_ok());
        assert!(ModelConfig::transformer_base().validate().is_ok());
        let mut c = ModelConfig::toy(10, 10);
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        c.dropout = 0.0;
        c.vocab_tgt = 0;
        assert!(c.validate().is_err());
    }
}
