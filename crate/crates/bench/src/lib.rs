//! Shared fixtures for the criterion benchmarks.

use confexit_core::data::CLS_ID;
use confexit_core::{Model, ModelConfig};

/// Desk-scale model with seeded random weights.
pub fn fixture_model(depth: usize) -> Model {
    let cfg = ModelConfig {
        depth,
        ..ModelConfig::default()
    };
    Model::new(cfg, 17).expect("default config is valid")
}

/// A `[cls]`-led input of `len` tokens cycling through the vocabulary.
pub fn fixture_input(model: &Model, len: usize) -> Vec<u32> {
    let vocab = model.cfg.vocab_size as u32;
    std::iter::once(CLS_ID)
        .chain((1..len as u32).map(|i| 3 + (i * 7) % (vocab - 3)))
        .collect()
}
