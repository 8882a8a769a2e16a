//! Two-stage early-exit decision engine.
//!
//! The engine consumes one [`ProbDist`] per executed encoder layer and reports
//! whether inference should stop. It knows nothing about the model that
//! produced the distributions.
//!
//! Stage one fires when the puzzlement (normalized entropy) of the newest
//! distribution is strictly below `delta`. Stage two is consulted only when
//! stage one declines; it looks at the last `window_size` distributions and
//! applies one of three trend criteria. Stage two stays silent until the
//! window is full.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dist::ProbDist;
use crate::{Error, Result};

pub const DEFAULT_WINDOW: usize = 8;
pub const DEFAULT_RANGE_EPSILON: f64 = 0.05;

/// Normalized entropy of `p`: 0 for one-hot, 1 for uniform.
///
/// Evaluated as `1 - KL(p || uniform) / ln C`, which is algebraically equal to
/// `sum p ln p / ln(1/C)` but hits both endpoints exactly: a one-hot input
/// gives `KL = ln C`, and a uniform input gives `p * C == 1` so every log term
/// vanishes. Zero entries contribute nothing.
pub fn puzzlement(p: &ProbDist) -> f64 {
    let probs = p.probs();
    let c = probs.len() as f64;
    let kl: f64 = probs
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * (x * c).ln())
        .sum();
    (1.0 - kl / c.ln()).clamp(0.0, 1.0)
}

/// Stage-two trend criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    /// The newest predicted class's probability is weakly monotone across the window.
    #[serde(rename = "monotone")]
    MonotoneProb,
    /// The spread of `max(p)` over the window is below `range_epsilon`.
    MaxRange,
    /// Every distribution in the window predicts the same label.
    StableLabel,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [
        Criterion::MonotoneProb,
        Criterion::MaxRange,
        Criterion::StableLabel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::MonotoneProb => "monotone",
            Criterion::MaxRange => "max-range",
            Criterion::StableLabel => "stable-label",
        }
    }

    fn stage2_reason(self) -> ExitReason {
        match self {
            Criterion::MonotoneProb => ExitReason::Stage2Criterion1,
            Criterion::MaxRange => ExitReason::Stage2Criterion2,
            Criterion::StableLabel => ExitReason::Stage2Criterion3,
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monotone" => Ok(Criterion::MonotoneProb),
            "max-range" => Ok(Criterion::MaxRange),
            "stable-label" => Ok(Criterion::StableLabel),
            other => Err(Error::config(format!(
                "unknown criterion {other:?} (expected monotone, max-range or stable-label)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitConfig {
    pub delta: f64,
    pub window_size: usize,
    pub criterion: Criterion,
    pub range_epsilon: f64,
    pub stage1_enabled: bool,
    pub stage2_enabled: bool,
}

impl Default for ExitConfig {
    fn default() -> Self {
        Self {
            delta: 0.5,
            window_size: DEFAULT_WINDOW,
            criterion: Criterion::MonotoneProb,
            range_epsilon: DEFAULT_RANGE_EPSILON,
            stage1_enabled: true,
            stage2_enabled: true,
        }
    }
}

impl ExitConfig {
    /// A policy that never fires; inference always runs to full depth.
    pub fn disabled() -> Self {
        Self {
            stage1_enabled: false,
            stage2_enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::config(format!(
                "delta {} outside [0, 1]",
                self.delta
            )));
        }
        if self.window_size == 0 {
            return Err(Error::config("window size must be positive"));
        }
        if self.stage2_enabled && self.window_size < 2 {
            return Err(Error::config("stage 2 needs a window of at least 2"));
        }
        if self.range_epsilon.is_nan() || self.range_epsilon <= 0.0 {
            return Err(Error::config(format!(
                "range epsilon {} must be positive",
                self.range_epsilon
            )));
        }
        Ok(())
    }

    /// Short label for the enabled stages: `s1`, `s2`, `s1s2` or `none`.
    pub fn stages_label(&self) -> &'static str {
        match (self.stage1_enabled, self.stage2_enabled) {
            (true, true) => "s1s2",
            (true, false) => "s1",
            (false, true) => "s2",
            (false, false) => "none",
        }
    }

    /// Sets the stage toggles from a label produced by [`stages_label`](Self::stages_label).
    pub fn set_stages(&mut self, label: &str) -> Result<()> {
        let (s1, s2) = match label {
            "s1s2" => (true, true),
            "s1" => (true, false),
            "s2" => (false, true),
            "none" => (false, false),
            other => {
                return Err(Error::config(format!(
                    "unknown stages {other:?} (expected s1, s2, s1s2 or none)"
                )))
            }
        };
        self.stage1_enabled = s1;
        self.stage2_enabled = s2;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExitReason {
    Stage1,
    Stage2Criterion1,
    Stage2Criterion2,
    Stage2Criterion3,
    Exhausted,
}

impl ExitReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExitReason::Stage1 => "Stage1",
            ExitReason::Stage2Criterion1 => "Stage2Criterion1",
            ExitReason::Stage2Criterion2 => "Stage2Criterion2",
            ExitReason::Stage2Criterion3 => "Stage2Criterion3",
            ExitReason::Exhausted => "Exhausted",
        }
    }
}

impl fmt::Display for ExitReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub fired: bool,
    pub layer: usize,
    pub reason: ExitReason,
}

impl ExitDecision {
    fn fired(layer: usize, reason: ExitReason) -> Self {
        Self {
            fired: true,
            layer,
            reason,
        }
    }

    fn pending(layer: usize) -> Self {
        Self {
            fired: false,
            layer,
            reason: ExitReason::Exhausted,
        }
    }
}

#[derive(Debug, Clone)]
struct WindowEntry {
    layer: usize,
    probs: Vec<f64>,
    label: usize,
    max_prob: f64,
}

/// Rolling buffer of the most recent distributions, oldest first.
#[derive(Debug, Clone)]
pub struct ConfidenceWindow {
    capacity: usize,
    entries: VecDeque<WindowEntry>,
}

impl ConfidenceWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    /// Appends `p`, evicting the oldest entry when full.
    ///
    /// Layer indices must increase by exactly one per push.
    pub fn push(&mut self, p: &ProbDist) -> Result<()> {
        if let Some(last) = self.entries.back() {
            if p.layer() != last.layer + 1 {
                return Err(Error::usage(format!(
                    "window expected layer {}, got {}",
                    last.layer + 1,
                    p.layer()
                )));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        let label = p.argmax();
        self.entries.push_back(WindowEntry {
            layer: p.layer(),
            probs: p.probs().to_vec(),
            label,
            max_prob: p.probs()[label],
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.label)
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.layer)
    }
}

pub fn stage1_check(p: &ProbDist, cfg: &ExitConfig) -> bool {
    puzzlement(p) < cfg.delta
}

/// Evaluates the configured stage-two criterion over the last
/// `cfg.window_size` entries of `w`. Returns false until that many exist.
pub fn stage2_check(w: &ConfidenceWindow, cfg: &ExitConfig) -> bool {
    let n = cfg.window_size;
    if w.len() < n {
        return false;
    }
    let recent: Vec<&WindowEntry> = w.entries.iter().skip(w.len() - n).collect();
    match cfg.criterion {
        Criterion::MonotoneProb => {
            let class = recent[n - 1].label;
            let mut up = true;
            let mut down = true;
            for pair in recent.windows(2) {
                let (a, b) = (pair[0].probs[class], pair[1].probs[class]);
                up &= b >= a;
                down &= b <= a;
            }
            up || down
        }
        Criterion::MaxRange => {
            let (lo, hi) = recent
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
                    (lo.min(e.max_prob), hi.max(e.max_prob))
                });
            hi - lo < cfg.range_epsilon
        }
        Criterion::StableLabel => recent.iter().all(|e| e.label == recent[0].label),
    }
}

/// Per-input exit state. Feed distributions in layer order starting at 1.
#[derive(Debug, Clone)]
pub struct ExitEngine {
    cfg: ExitConfig,
    window: ConfidenceWindow,
    next_layer: usize,
    fired: bool,
}

impl ExitEngine {
    pub fn new(cfg: ExitConfig) -> Result<Self> {
        cfg.validate()?;
        let window = ConfidenceWindow::new(cfg.window_size);
        Ok(Self {
            cfg,
            window,
            next_layer: 1,
            fired: false,
        })
    }

    pub fn config(&self) -> &ExitConfig {
        &self.cfg
    }

    pub fn window(&self) -> &ConfidenceWindow {
        &self.window
    }

    pub fn has_fired(&self) -> bool {
        self.fired
    }

    /// Pushes `p` into the window and checks stage one, then stage two.
    pub fn observe(&mut self, p: &ProbDist) -> Result<ExitDecision> {
        if self.fired {
            return Err(Error::usage("observe called after the engine fired"));
        }
        if p.layer() != self.next_layer {
            return Err(Error::usage(format!(
                "expected layer {}, got {}",
                self.next_layer,
                p.layer()
            )));
        }
        self.window.push(p)?;
        self.next_layer += 1;

        let decision = if self.cfg.stage1_enabled && stage1_check(p, &self.cfg) {
            ExitDecision::fired(p.layer(), ExitReason::Stage1)
        } else if self.cfg.stage2_enabled && stage2_check(&self.window, &self.cfg) {
            ExitDecision::fired(p.layer(), self.cfg.criterion.stage2_reason())
        } else {
            ExitDecision::pending(p.layer())
        };
        self.fired = decision.fired;
        Ok(decision)
    }
}

/// Runs a whole stream through a fresh engine and returns the first firing
/// decision, or a non-fired decision at the last layer.
pub fn decide_stream(stream: &[ProbDist], cfg: &ExitConfig) -> Result<ExitDecision> {
    let mut engine = ExitEngine::new(cfg.clone())?;
    let mut last = None;
    for p in stream {
        let d = engine.observe(p)?;
        if d.fired {
            return Ok(d);
        }
        last = Some(d);
    }
    last.ok_or_else(|| Error::input("empty distribution stream"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(layer: usize, probs: &[f64]) -> ProbDist {
        ProbDist::new(layer, probs.to_vec()).unwrap()
    }

    fn window_of(rows: &[Vec<f64>], cap: usize) -> ConfidenceWindow {
        let mut w = ConfidenceWindow::new(cap);
        for (i, r) in rows.iter().enumerate() {
            w.push(&dist(i + 1, r)).unwrap();
        }
        w
    }

    fn cfg_with(criterion: Criterion) -> ExitConfig {
        ExitConfig {
            criterion,
            ..ExitConfig::default()
        }
    }

    #[test]
    fn puzzlement_endpoints_are_exact() {
        for c in 2..=12 {
            let uniform = dist(1, &vec![1.0 / c as f64; c]);
            assert_eq!(puzzlement(&uniform), 1.0, "C={c}");
            let mut onehot = vec![0.0; c];
            onehot[c - 1] = 1.0;
            assert_eq!(puzzlement(&dist(1, &onehot)), 0.0, "C={c}");
        }
    }

    #[test]
    fn puzzlement_binary_point() {
        // 0.9 ln 0.9 + 0.1 ln 0.1 = -0.325083..., divided by ln 0.5.
        let direct = (0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln()) / 0.5f64.ln();
        let p = puzzlement(&dist(1, &[0.9, 0.1]));
        assert!((p - direct).abs() < 1e-12);
        assert!((p - 0.468996).abs() < 1e-5);
    }

    #[test]
    fn stage1_boundaries() {
        let uniform = dist(1, &[0.5, 0.5]);
        let skewed = dist(1, &[0.9, 0.1]);
        let onehot = dist(1, &[1.0, 0.0]);
        let mut cfg = ExitConfig {
            delta: 0.0,
            ..ExitConfig::default()
        };
        assert!(!stage1_check(&onehot, &cfg));
        assert!(!stage1_check(&skewed, &cfg));
        cfg.delta = 1.0;
        assert!(!stage1_check(&uniform, &cfg));
        assert!(stage1_check(&skewed, &cfg));
        cfg.delta = 0.5;
        assert!(stage1_check(&skewed, &cfg));
    }

    #[test]
    fn stage2_inactive_until_window_full() {
        let rows = vec![vec![0.9, 0.1]; 7];
        let w = window_of(&rows, 8);
        for c in Criterion::ALL {
            assert!(!stage2_check(&w, &cfg_with(c)));
        }
    }

    #[test]
    fn stable_label_full_window() {
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                let hi = 0.55 + 0.01 * ((i * 7) % 5) as f64;
                vec![1.0 - hi, hi]
            })
            .collect();
        let w = window_of(&rows, 8);
        assert!(w.labels().all(|l| l == 1));
        assert!(stage2_check(&w, &cfg_with(Criterion::StableLabel)));
    }

    #[test]
    fn max_range_example() {
        let maxes = [0.70, 0.71, 0.73, 0.72, 0.71, 0.70, 0.72, 0.73];
        let rows: Vec<Vec<f64>> = maxes.iter().map(|&m| vec![m, 1.0 - m]).collect();
        let w = window_of(&rows, 8);
        let mut cfg = cfg_with(Criterion::MaxRange);
        cfg.range_epsilon = 0.05;
        assert!(stage2_check(&w, &cfg));
        cfg.range_epsilon = 0.03;
        // 0.73 - 0.70 is 0.03 up to rounding; the comparison is strict.
        assert_eq!(stage2_check(&w, &cfg), 0.73 - 0.70 < 0.03);
        cfg.range_epsilon = 0.02;
        assert!(!stage2_check(&w, &cfg));
    }

    #[test]
    fn monotone_example_and_break() {
        let ps = [0.52, 0.55, 0.55, 0.58, 0.61, 0.66, 0.70, 0.74];
        let rows: Vec<Vec<f64>> = ps.iter().map(|&m| vec![m, 1.0 - m]).collect();
        let w = window_of(&rows, 8);
        assert!(stage2_check(&w, &cfg_with(Criterion::MonotoneProb)));

        let mut broken = rows.clone();
        broken[4] = vec![0.50, 0.50];
        let w = window_of(&broken, 8);
        assert!(!stage2_check(&w, &cfg_with(Criterion::MonotoneProb)));
    }

    #[test]
    fn monotone_tracks_newest_label_downward() {
        // Class 0 falls steadily, but the newest prediction is class 1, whose
        // probability rises: still monotone.
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                let a = 0.8 - 0.05 * i as f64;
                vec![a, 1.0 - a]
            })
            .collect();
        let w = window_of(&rows, 8);
        assert_eq!(w.labels().last(), Some(1));
        assert!(stage2_check(&w, &cfg_with(Criterion::MonotoneProb)));
    }

    #[test]
    fn window_evicts_oldest() {
        let rows = vec![vec![0.6, 0.4]; 10];
        let w = window_of(&rows, 4);
        assert_eq!(w.len(), 4);
        assert_eq!(w.layers().collect::<Vec<_>>(), vec![7, 8, 9, 10]);
    }

    #[test]
    fn stage1_takes_precedence() {
        let mut cfg = cfg_with(Criterion::StableLabel);
        cfg.window_size = 2;
        cfg.delta = 0.5;
        let mut engine = ExitEngine::new(cfg).unwrap();
        let d1 = engine.observe(&dist(1, &[0.6, 0.4])).unwrap();
        assert!(!d1.fired);
        // Layer 2: window full with stable labels and puzzlement 0.469 < 0.5.
        let d2 = engine.observe(&dist(2, &[0.9, 0.1])).unwrap();
        assert_eq!(d2, ExitDecision::fired(2, ExitReason::Stage1));
    }

    #[test]
    fn stage2_reason_per_criterion() {
        let rows = [[0.6, 0.4], [0.62, 0.38]];
        for (c, reason) in [
            (Criterion::MonotoneProb, ExitReason::Stage2Criterion1),
            (Criterion::MaxRange, ExitReason::Stage2Criterion2),
            (Criterion::StableLabel, ExitReason::Stage2Criterion3),
        ] {
            let cfg = ExitConfig {
                delta: 0.1,
                window_size: 2,
                criterion: c,
                ..ExitConfig::default()
            };
            let stream: Vec<ProbDist> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| dist(i + 1, r))
                .collect();
            let d = decide_stream(&stream, &cfg).unwrap();
            assert_eq!(d, ExitDecision::fired(2, reason));
        }
    }

    #[test]
    fn disabled_policy_exhausts() {
        let mut engine = ExitEngine::new(ExitConfig::disabled()).unwrap();
        let mut last = None;
        for l in 1..=12 {
            last = Some(engine.observe(&dist(l, &[1.0, 0.0])).unwrap());
        }
        let d = last.unwrap();
        assert!(!d.fired);
        assert_eq!(d.reason, ExitReason::Exhausted);
        assert_eq!(d.layer, 12);
    }

    #[test]
    fn usage_errors() {
        let mut engine = ExitEngine::new(ExitConfig::default()).unwrap();
        assert!(matches!(
            engine.observe(&dist(2, &[0.5, 0.5])),
            Err(Error::Usage(_))
        ));
        let d = engine.observe(&dist(1, &[1.0, 0.0])).unwrap();
        assert!(d.fired);
        assert!(matches!(
            engine.observe(&dist(2, &[1.0, 0.0])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn config_validation() {
        let cfg = ExitConfig {
            delta: 1.5,
            ..ExitConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = ExitConfig {
            window_size: 1,
            ..ExitConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.stage2_enabled = false;
        assert!(cfg.validate().is_ok());
        cfg.range_epsilon = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_labels_round_trip() {
        let mut cfg = ExitConfig::default();
        for label in ["s1", "s2", "s1s2", "none"] {
            cfg.set_stages(label).unwrap();
            assert_eq!(cfg.stages_label(), label);
        }
        assert!(cfg.set_stages("s3").is_err());
        for c in Criterion::ALL {
            assert_eq!(c.as_str().parse::<Criterion>().unwrap(), c);
        }
    }
}
