//! Cumulative `[cls]` attention profiles.
//!
//! For each executed layer the `[cls]` query row is averaged over heads; the
//! profile at layer `i` is the running mean of those rows over layers
//! `1..=i`. Each profile entry is a convex combination of attention rows and
//! therefore sums to one.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::exit_policy::{ExitDecision, ExitReason};
use crate::fsutil::write_atomic;
use crate::model::LayerTrace;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    /// 1-based encoder layer.
    pub index: usize,
    /// Cumulative attention of `[cls]` to each token.
    pub scores: Vec<f64>,
    pub predicted_label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitInfo {
    pub layer: usize,
    pub reason: ExitReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub tokens: Vec<String>,
    pub layers: Vec<LayerScores>,
    pub exit: ExitInfo,
}

impl AttentionProfile {
    /// Replaces the placeholder token labels (`#<id>`).
    pub fn with_tokens(mut self, tokens: Vec<String>) -> Self {
        assert_eq!(tokens.len(), self.tokens.len(), "one label per position");
        self.tokens = tokens;
        self
    }

    pub fn with_exit(mut self, decision: &ExitDecision) -> Self {
        self.exit = ExitInfo {
            layer: decision.layer,
            reason: decision.reason,
        };
        self
    }
}

/// Mean over heads of the query-0 attention row.
pub fn head_mean_cls_row(attention: &Array3<f64>) -> Vec<f64> {
    attention
        .index_axis(Axis(1), 0)
        .mean_axis(Axis(0))
        .expect("at least one head")
        .to_vec()
}

/// Builds the profile for every layer in `trace`. The exit defaults to the
/// last traced layer with reason `Exhausted`; use
/// [`with_exit`](AttentionProfile::with_exit) to attach the real decision.
pub fn cumulative_attention(trace: &LayerTrace) -> Result<AttentionProfile> {
    if trace.attentions.is_empty() {
        return Err(Error::input("trace has no attention tensors"));
    }
    let len = trace.token_ids.len();
    let mut running = vec![0.0; len];
    let mut layers = Vec::with_capacity(trace.attentions.len());
    for (i, (attn, dist)) in trace.attentions.iter().zip(&trace.dists).enumerate() {
        let row = head_mean_cls_row(attn);
        for (acc, v) in running.iter_mut().zip(&row) {
            *acc += v;
        }
        let k = (i + 1) as f64;
        layers.push(LayerScores {
            index: i + 1,
            scores: running.iter().map(|s| s / k).collect(),
            predicted_label: dist.argmax(),
        });
    }
    Ok(AttentionProfile {
        tokens: trace.token_ids.iter().map(|id| format!("#{id}")).collect(),
        exit: ExitInfo {
            layer: layers.len(),
            reason: ExitReason::Exhausted,
        },
        layers,
    })
}

/// Checks a parsed JSON document against the profile schema:
/// `{tokens: [string], layers: [{index: uint, scores: [number], predicted_label: uint}],
///   exit: {layer: uint, reason: string}}`, with every `scores` as long as `tokens`.
pub fn validate_profile_json(v: &serde_json::Value) -> Result<()> {
    let bad = |msg: &str| Error::input(format!("profile schema: {msg}"));
    let tokens = v
        .get("tokens")
        .and_then(|t| t.as_array())
        .ok_or_else(|| bad("tokens must be an array"))?;
    if !tokens.iter().all(|t| t.is_string()) {
        return Err(bad("tokens must be strings"));
    }
    let layers = v
        .get("layers")
        .and_then(|l| l.as_array())
        .ok_or_else(|| bad("layers must be an array"))?;
    for layer in layers {
        layer
            .get("index")
            .and_then(|i| i.as_u64())
            .ok_or_else(|| bad("layer index must be a non-negative integer"))?;
        layer
            .get("predicted_label")
            .and_then(|i| i.as_u64())
            .ok_or_else(|| bad("predicted_label must be a non-negative integer"))?;
        let scores = layer
            .get("scores")
            .and_then(|s| s.as_array())
            .ok_or_else(|| bad("scores must be an array"))?;
        if scores.len() != tokens.len() || !scores.iter().all(|s| s.is_number()) {
            return Err(bad("scores must be numbers, one per token"));
        }
    }
    let exit = v.get("exit").ok_or_else(|| bad("missing exit"))?;
    exit.get("layer")
        .and_then(|l| l.as_u64())
        .ok_or_else(|| bad("exit.layer must be a non-negative integer"))?;
    exit.get("reason")
        .and_then(|r| r.as_str())
        .ok_or_else(|| bad("exit.reason must be a string"))?;
    Ok(())
}

pub fn export_profile(profile: &AttentionProfile, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(profile)? + "\n";
    write_atomic(path, body.as_bytes())
}

pub fn read_profile(path: &Path) -> Result<AttentionProfile> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    validate_profile_json(&value)?;
    Ok(serde_json::from_value(value)?)
}

/// Static SVG: one bar chart per layer, a bar per token, exit layer highlighted.
pub fn render_svg(profile: &AttentionProfile) -> String {
    const BAR_W: f64 = 28.0;
    const CHART_H: f64 = 80.0;
    const ROW_H: f64 = CHART_H + 44.0;
    const LEFT: f64 = 110.0;

    let n = profile.tokens.len().max(1);
    let width = LEFT + BAR_W * n as f64 + 20.0;
    let height = ROW_H * profile.layers.len() as f64 + 20.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="10">"#
    );
    for (row, layer) in profile.layers.iter().enumerate() {
        let top = 10.0 + ROW_H * row as f64;
        let base = top + CHART_H;
        let exit_here = layer.index == profile.exit.layer;
        let fill = if exit_here { "#d62728" } else { "#1f77b4" };
        let _ = writeln!(
            svg,
            r#"<text x="4" y="{}">layer {} -> {}{}</text>"#,
            top + 12.0,
            layer.index,
            layer.predicted_label,
            if exit_here { " (exit)" } else { "" }
        );
        let peak = layer.scores.iter().copied().fold(0.0, f64::max).max(1e-12);
        for (i, &s) in layer.scores.iter().enumerate() {
            let h = CHART_H * s / peak;
            let x = LEFT + BAR_W * i as f64;
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.1}" y="{:.2}" width="{:.1}" height="{h:.2}" fill="{fill}"><title>{:.4}</title></rect>"#,
                base - h,
                BAR_W - 4.0,
                s
            );
            let label = escape(profile.tokens.get(i).map_or("", String::as_str));
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" transform="rotate(45 {:.1} {:.1})">{label}</text>"#,
                x + 2.0,
                base + 10.0,
                x + 2.0,
                base + 10.0
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
