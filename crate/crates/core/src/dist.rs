use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on the probability mass of a [`ProbDist`].
pub const SUM_TOLERANCE: f64 = 1e-6;

/// A classifier output distribution over `C` classes, tagged with the encoder
/// layer (1-based) that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbDist {
    layer: usize,
    probs: Vec<f64>,
}

impl ProbDist {
    /// Validates and wraps an explicit probability vector.
    pub fn new(layer: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::input(format!(
                "distribution needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::input(format!("probability {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::input(format!("probabilities sum to {sum}")));
        }
        Ok(Self { layer, probs })
    }

    /// Numerically stable softmax of `logits`.
    pub fn from_logits(layer: usize, logits: &[f64]) -> Self {
        Self {
            layer,
            probs: softmax(logits),
        }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax()]
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
