//! Brute-force reference for the exit policy, shared by several test targets.
#![allow(dead_code)]

use confexit_core::{Criterion, ExitConfig, ExitReason};

/// Plain Shannon entropy divided by `ln C`.
pub fn sim_entropy(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    h / (p.len() as f64).ln()
}

pub fn sim_argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

/// Written from the policy description alone, rescanning the whole prefix
/// at every layer instead of keeping a window.
pub fn simulate(rows: &[Vec<f64>], cfg: &ExitConfig) -> (bool, usize, ExitReason) {
    for k in 1..=rows.len() {
        let p = &rows[k - 1];
        if cfg.stage1_enabled && sim_entropy(p) < cfg.delta {
            return (true, k, ExitReason::Stage1);
        }
        let n = cfg.window_size;
        if cfg.stage2_enabled && k >= n {
            let last = &rows[k - n..k];
            let fire = match cfg.criterion {
                Criterion::MonotoneProb => {
                    let c = sim_argmax(&last[n - 1]);
                    let series: Vec<f64> = last.iter().map(|r| r[c]).collect();
                    let rising = (1..n).all(|i| series[i] >= series[i - 1]);
                    let falling = (1..n).all(|i| series[i] <= series[i - 1]);
                    rising || falling
                }
                Criterion::MaxRange => {
                    let tops: Vec<f64> = last.iter().map(|r| r[sim_argmax(r)]).collect();
                    let hi = tops.iter().cloned().fold(f64::MIN, f64::max);
                    let lo = tops.iter().cloned().fold(f64::MAX, f64::min);
                    hi - lo < cfg.range_epsilon
                }
                Criterion::StableLabel => {
                    let l = sim_argmax(&last[0]);
                    last.iter().all(|r| sim_argmax(r) == l)
                }
            };
            if fire {
                let reason = match cfg.criterion {
                    Criterion::MonotoneProb => ExitReason::Stage2Criterion1,
                    Criterion::MaxRange => ExitReason::Stage2Criterion2,
                    Criterion::StableLabel => ExitReason::Stage2Criterion3,
                };
                return (true, k, reason);
            }
        }
    }
    (false, rows.len(), ExitReason::Exhausted)
}
