use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Architecture hyperparameters.
///
/// `depth` is the number of times the single shared encoder block is applied.
/// `embed_dim` is the factorized embedding width; token embeddings are
/// projected from `embed_dim` to `hidden_dim` before the first block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 128,
            max_seq_len: 32,
            num_classes: 2,
            embed_dim: 32,
        }
    }
}

/// Keys in the order they are written to checkpoint headers.
pub(crate) const CONFIG_KEYS: [&str; 8] = [
    "depth",
    "hidden_dim",
    "num_heads",
    "ffn_dim",
    "vocab_size",
    "max_seq_len",
    "num_classes",
    "embed_dim",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Same architecture with a different number of encoder applications.
    pub fn with_depth(&self, depth: usize) -> Self {
        Self {
            depth,
            ..self.clone()
        }
    }

    pub fn get(&self, key: &str) -> Option<usize> {
        Some(match key {
            "depth" => self.depth,
            "hidden_dim" => self.hidden_dim,
            "num_heads" => self.num_heads,
            "ffn_dim" => self.ffn_dim,
            "vocab_size" => self.vocab_size,
            "max_seq_len" => self.max_seq_len,
            "num_classes" => self.num_classes,
            "embed_dim" => self.embed_dim,
            _ => return None,
        })
    }

    /// Sets one field by name. Returns `Ok(false)` for keys that are not
    /// model fields so callers can route them elsewhere.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let slot = match key {
            "depth" => &mut self.depth,
            "hidden_dim" => &mut self.hidden_dim,
            "num_heads" => &mut self.num_heads,
            "ffn_dim" => &mut self.ffn_dim,
            "vocab_size" => &mut self.vocab_size,
            "max_seq_len" => &mut self.max_seq_len,
            "num_classes" => &mut self.num_classes,
            "embed_dim" => &mut self.embed_dim,
            _ => return Ok(false),
        };
        *slot = value
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("{key}: expected an integer, got {value:?}")))?;
        Ok(true)
    }

    /// Builds a config from `key=value` pairs; every field is required.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for key in CONFIG_KEYS {
            let v = pairs
                .get(key)
                .ok_or_else(|| Error::config(format!("missing {key}")))?;
            cfg.set(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
