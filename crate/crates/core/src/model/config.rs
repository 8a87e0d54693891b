use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenizer::VOCAB_SIZE;
use crate::error::{Error, Result};

/// Shape and seed of the frozen base transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            max_context: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return fail("model dimensions must be positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail("d_model must be divisible by n_heads");
        }
        if self.max_context < 2 {
            return fail("max_context must be at least 2");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Stable 64-bit digest of every field.
    pub fn hash64(&self) -> u64 {
        let canon = format!(
            "v{};d{};l{};h{};f{};c{};s{}",
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_context,
            self.seed
        );
        let digest = Sha256::digest(canon.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().head_dim(), 32);
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_depends_on_seed() {
        let a = ModelConfig::default();
        let b = ModelConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash64(), a.clone().hash64());
        assert_ne!(a.hash64(), b.hash64());
    }
}
