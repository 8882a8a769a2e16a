//! Parameter-shared transformer classifier with a two-stage, confidence-window
//! early-exit policy.
//!
//! One encoder block is applied up to `depth` times; after every pass a shared
//! classifier head produces a class distribution and the [`exit_policy`] engine
//! decides whether to stop. Stage one thresholds the normalized entropy
//! ("puzzlement") of the current distribution; stage two, consulted only when
//! stage one declines, inspects a rolling window of recent distributions.
//!
//! Module map:
//!
//! - [`model`]: configuration, parameters, forward passes, checkpoints
//! - [`exit_policy`]: the pure exit decision engine
//! - [`training`]: multi-exit loss, backpropagation, Adam, gradient audit
//! - [`data`]: vocabulary, encoding, TSV datasets, synthetic sentiment corpus
//! - [`bench`]: threshold sweeps, truncated-depth baselines, curve export
//! - [`attnviz`]: cumulative `[cls]` attention profiles and SVG rendering

pub mod attnviz;
pub mod bench;
pub mod data;
mod dist;
mod error;
pub mod exit_policy;
mod fsutil;
pub mod model;
pub mod training;

pub use error::{Error, Result};
pub use fsutil::write_atomic;

pub use attnviz::{cumulative_attention, AttentionProfile};
pub use bench::{evaluate, sweep, truncated_baseline, CurvePoint, SweepConfig};
pub use data::{Example, SynthSpec, Vocab};
pub use exit_policy::{puzzlement, Criterion, ExitConfig, ExitDecision, ExitEngine, ExitReason};
pub use model::{
    forward_adaptive, forward_full, HiddenState, LayerTrace, Model, ModelConfig, Parameters,
    ProbDist,
};
pub use training::{train, LossReport, TrainConfig};
