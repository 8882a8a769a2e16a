//! Parameter-shared transformer classifier.
//!
//! An input is embedded once, then a single [`EncoderBlock`] is applied up to
//! `depth` times. After every application the classifier head reads the
//! `[cls]` row and emits a [`ProbDist`]. Because the block is shared, the
//! layer-`i` output does not depend on the configured depth.

pub mod checkpoint;
mod config;
mod flops;
mod forward;
mod params;

pub use crate::dist::ProbDist;
pub use config::ModelConfig;
pub use flops::{flops_estimate, FlopsEstimate};
pub use forward::{
    classify, embed, encoder_step, forward_adaptive, forward_full, HiddenState, LayerTrace,
};
pub use params::{EncoderBlock, Parameters, DEFAULT_T_INIT, EXIT_T_NAME};

pub(crate) use forward::{
    cls_logits, embed_rows, encoder_forward, gelu_grad, Dropout, EncoderCache,
};

use crate::Result;

/// Configuration plus weights. Immutable during inference and safe to share
/// across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Parameters,
}

impl Model {
    /// Validates `cfg` and draws seeded initial weights.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_t_init(cfg, seed, DEFAULT_T_INIT)
    }

    pub fn with_t_init(cfg: ModelConfig, seed: u64, t_init: f64) -> Result<Self> {
        cfg.validate()?;
        let params = Parameters::init(&cfg, seed, t_init);
        Ok(Self { cfg, params })
    }

    /// The same weights run for a different number of encoder passes.
    pub fn with_depth(&self, depth: usize) -> Result<Self> {
        let cfg = self.cfg.with_depth(depth);
        cfg.validate()?;
        let mut params = self.params.clone();
        params.resize_exit_weights(depth, DEFAULT_T_INIT);
        Ok(Self { cfg, params })
    }
}
