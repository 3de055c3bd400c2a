use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelError, ModuleKind};

/// Architecture hyper-parameters plus the initialization seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The default desk-scale shape; `vocab_size` comes from the tokenizer.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_mlp: 256,
            context_len: 128,
            seed: 0,
        }
    }

    /// A smaller shape used by the end-to-end test pipelines.
    pub fn compact(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 32,
            n_layers: 3,
            n_heads: 4,
            d_mlp: 96,
            context_len: 128,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("context_len", self.context_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// `(rows, cols)` of a module weight; rows are output units.
    pub fn module_shape(&self, m: ModuleKind) -> (usize, usize) {
        match m {
            ModuleKind::FcIn => (self.d_mlp, self.d_model),
            ModuleKind::FcOut => (self.d_model, self.d_mlp),
            _ => (self.d_model, self.d_model),
        }
    }

    /// Hash over the architecture fields (the seed is excluded), used to
    /// check that masks and checkpoints belong together.
    pub fn arch_hash(&self) -> String {
        let key = format!(
            "v={};d={};l={};h={};m={};c={}",
            self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_mlp, self.context_len
        );
        hex::encode(Sha256::digest(key.as_bytes()))
    }
}
