use serde::Serialize;

use super::ModelConfig;

/// Multiply-accumulate counts for one encoder pass and one classifier call
/// on a full-length (`max_seq_len`) input.
///
/// Encoder: Q/K/V/output projections `4 L d^2`, scores and context `2 L^2 d`
/// (summed over heads), feed-forward `2 L d f`. Classifier: `d C` on the
/// `[cls]` row. Norms, softmax and activations are elementwise and ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopsEstimate {
    pub encoder_macs: f64,
    pub classifier_macs: f64,
}

impl FlopsEstimate {
    pub fn classifier_ratio(&self) -> f64 {
        self.classifier_macs / self.encoder_macs
    }
}

pub fn flops_estimate(cfg: &ModelConfig) -> FlopsEstimate {
    let l = cfg.max_seq_len as f64;
    let d = cfg.hidden_dim as f64;
    let f = cfg.ffn_dim as f64;
    let c = cfg.num_classes as f64;
    FlopsEstimate {
        encoder_macs: 4.0 * l * d * d + 2.0 * l * l * d + 2.0 * l * d * f,
        classifier_macs: d * c,
    }
}
