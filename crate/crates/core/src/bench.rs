//! Accuracy-versus-cost evaluation.
//!
//! Cost is counted in encoder passes: an input that exits at layer `k` of a
//! depth-`M` model costs `k / M`. Classifier and exit-check overhead is
//! ignored (it is a small fraction of one encoder pass, see
//! [`flops_estimate`](crate::model::flops_estimate)). Inputs are evaluated one
//! at a time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Encoded;
use crate::exit_policy::{Criterion, ExitConfig, ExitReason};
use crate::fsutil::write_atomic;
use crate::model::{forward_adaptive, Model};
use crate::{Error, Result};

/// One operating point of the early-exit model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub delta: f64,
    pub accuracy: f64,
    pub mean_cost_ratio: f64,
    /// `exit_histogram[k]` counts inputs that exited after layer `k + 1`.
    pub exit_histogram: Vec<usize>,
    pub criterion: Criterion,
    pub stages: String,
    pub window_size: usize,
}

impl CurvePoint {
    pub fn depth(&self) -> usize {
        self.exit_histogram.len()
    }

    pub fn total(&self) -> usize {
        self.exit_histogram.iter().sum()
    }

    pub fn mean_exit_layer(&self) -> f64 {
        self.mean_cost_ratio * self.depth() as f64
    }

    pub fn row(&self) -> CurveRow {
        CurveRow {
            delta: self.delta,
            accuracy: self.accuracy,
            cost_ratio: self.mean_cost_ratio,
            exit_histogram: self.exit_histogram.clone(),
        }
    }
}

/// The numeric columns of a curve CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub delta: f64,
    pub accuracy: f64,
    pub cost_ratio: f64,
    pub exit_histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub deltas: Vec<f64>,
    /// Template; `delta` is overwritten for each grid value.
    pub exit: ExitConfig,
}

/// `0.0, 0.1, ..., 1.0`.
pub fn default_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            deltas: default_grid(),
            exit: ExitConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.deltas.is_empty() {
            return Err(Error::config("delta grid is empty"));
        }
        if self.deltas.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::config("delta grid values must lie in [0, 1]"));
        }
        if self.deltas.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("delta grid must be sorted ascending"));
        }
        self.exit.validate()
    }
}

/// What happened to one evaluated input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Outcome {
    pub predicted: usize,
    pub gold: usize,
    pub exit_layer: usize,
    pub reason: ExitReason,
}

impl Outcome {
    pub fn correct(&self) -> bool {
        self.predicted == self.gold
    }
}

fn check_dataset(model: &Model, dataset: &[Encoded]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::input("evaluation set is empty"));
    }
    if let Some(e) = dataset.iter().find(|e| e.label >= model.cfg.num_classes) {
        return Err(Error::config(format!(
            "dataset label {} does not fit the model's {} classes",
            e.label, model.cfg.num_classes
        )));
    }
    Ok(())
}

/// Runs every input through [`forward_adaptive`] and returns per-input results.
pub fn evaluate_outcomes(
    model: &Model,
    dataset: &[Encoded],
    exit_cfg: &ExitConfig,
) -> Result<Vec<Outcome>> {
    check_dataset(model, dataset)?;
    exit_cfg.validate()?;
    dataset
        .iter()
        .map(|e| {
            let (predicted, decision, _) = forward_adaptive(&e.ids, model, exit_cfg)?;
            Ok(Outcome {
                predicted,
                gold: e.label,
                exit_layer: decision.layer,
                reason: decision.reason,
            })
        })
        .collect()
}

/// Aggregates outcomes into a curve point for a depth-`depth` model.
pub fn summarize(outcomes: &[Outcome], depth: usize, exit_cfg: &ExitConfig) -> CurvePoint {
    let mut hist = vec![0usize; depth];
    let mut correct = 0usize;
    for o in outcomes {
        hist[o.exit_layer - 1] += 1;
        correct += usize::from(o.correct());
    }
    let n = outcomes.len();
    let layer_sum: usize = hist.iter().enumerate().map(|(i, c)| (i + 1) * c).sum();
    CurvePoint {
        delta: exit_cfg.delta,
        accuracy: correct as f64 / n as f64,
        mean_cost_ratio: layer_sum as f64 / (depth * n) as f64,
        exit_histogram: hist,
        criterion: exit_cfg.criterion,
        stages: exit_cfg.stages_label().to_string(),
        window_size: exit_cfg.window_size,
    }
}

pub fn evaluate(model: &Model, dataset: &[Encoded], exit_cfg: &ExitConfig) -> Result<CurvePoint> {
    let outcomes = evaluate_outcomes(model, dataset, exit_cfg)?;
    Ok(summarize(&outcomes, model.cfg.depth, exit_cfg))
}

/// One [`evaluate`] per grid value of `delta`.
pub fn sweep(model: &Model, dataset: &[Encoded], cfg: &SweepConfig) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    cfg.deltas
        .iter()
        .map(|&delta| {
            let exit = ExitConfig {
                delta,
                ..cfg.exit.clone()
            };
            evaluate(model, dataset, &exit)
        })
        .collect()
}

/// A fixed-depth model with no exit criteria.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePoint {
    pub depth: usize,
    pub accuracy: f64,
    pub cost_ratio: f64,
}

/// Accuracy of the shared weights truncated to each depth in `depths`.
pub fn truncated_baseline(
    model: &Model,
    dataset: &[Encoded],
    depths: &[usize],
) -> Result<Vec<BaselinePoint>> {
    check_dataset(model, dataset)?;
    let full = model.cfg.depth;
    depths
        .iter()
        .map(|&depth| {
            if depth == 0 || depth > full {
                return Err(Error::config(format!(
                    "baseline depth {depth} outside [1, {full}]"
                )));
            }
            let truncated = model.with_depth(depth)?;
            let point = evaluate(&truncated, dataset, &ExitConfig::disabled())?;
            Ok(BaselinePoint {
                depth,
                accuracy: point.accuracy,
                cost_ratio: depth as f64 / full as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveFormat {
    Csv,
    Json,
}

impl CurveFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => CurveFormat::Json,
            _ => CurveFormat::Csv,
        }
    }
}

/// CSV header: `delta,accuracy,cost_ratio,layer_1,...,layer_M`.
pub fn curves_to_csv(points: &[CurvePoint]) -> Result<String> {
    let depth = points.first().map_or(0, CurvePoint::depth);
    if points.iter().any(|p| p.depth() != depth) {
        return Err(Error::input("curve points disagree on depth"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["delta".to_string(), "accuracy".into(), "cost_ratio".into()];
    header.extend((1..=depth).map(|l| format!("layer_{l}")));
    w.write_record(&header)?;
    for p in points {
        let mut rec = vec![
            p.delta.to_string(),
            p.accuracy.to_string(),
            p.mean_cost_ratio.to_string(),
        ];
        rec.extend(p.exit_histogram.iter().map(usize::to_string));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn export_curves(points: &[CurvePoint], path: &Path, format: CurveFormat) -> Result<()> {
    if points.is_empty() {
        return Err(Error::input("no curve points to export"));
    }
    let body = match format {
        CurveFormat::Csv => curves_to_csv(points)?,
        CurveFormat::Json => serde_json::to_string_pretty(points)? + "\n",
    };
    write_atomic(path, body.as_bytes())
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let bad = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg,
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("bad numeric column {i}")))
        };
        let hist = rec
            .iter()
            .skip(3)
            .map(|v| v.parse().map_err(|_| bad(format!("bad count {v:?}"))))
            .collect::<Result<Vec<usize>>>()?;
        rows.push(CurveRow {
            delta: num(0)?,
            accuracy: num(1)?,
            cost_ratio: num(2)?,
            exit_histogram: hist,
        });
    }
    Ok(rows)
}

pub fn read_curves_json(path: &Path) -> Result<Vec<CurvePoint>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(delta: f64, hist: Vec<usize>) -> CurvePoint {
        let outcomes: Vec<Outcome> = hist
            .iter()
            .enumerate()
            .flat_map(|(i, &c)| {
                (0..c).map(move |j| Outcome {
                    predicted: j % 2,
                    gold: 0,
                    exit_layer: i + 1,
                    reason: ExitReason::Stage1,
                })
            })
            .collect();
        let cfg = ExitConfig {
            delta,
            ..ExitConfig::default()
        };
        summarize(&outcomes, hist.len(), &cfg)
    }

    #[test]
    fn summarize_cost_ratio() {
        let p = point(0.3, vec![2, 0, 1, 1]);
        assert_eq!(p.total(), 4);
        assert_eq!(p.mean_cost_ratio, (2.0 + 3.0 + 4.0) / 16.0);
        assert_eq!(p.accuracy, 3.0 / 4.0);
    }

    #[test]
    fn default_grid_values() {
        let g = default_grid();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[3], 0.3);
        assert_eq!(g[10], 1.0);
    }

    #[test]
    fn sweep_config_validation() {
        let mut cfg = SweepConfig::default();
        cfg.validate().unwrap();
        cfg.deltas = vec![0.5, 0.2];
        assert!(cfg.validate().is_err());
        cfg.deltas = vec![1.5];
        assert!(cfg.validate().is_err());
        cfg.deltas.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_single_point_has_two_lines() {
        let csv = curves_to_csv(&[point(0.1, vec![1, 2, 3])]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0],
            "delta,accuracy,cost_ratio,layer_1,layer_2,layer_3"
        );
        assert!(lines[1].starts_with("0.1,"));
        assert!(lines[1].ends_with(",1,2,3"));
    }

    #[test]
    fn export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let points = vec![point(0.0, vec![0, 0, 5]), point(0.7, vec![3, 1, 1])];
        let csv_path = dir.path().join("c.csv");
        export_curves(&points, &csv_path, CurveFormat::Csv).unwrap();
        let rows = read_curves_csv(&csv_path).unwrap();
        assert_eq!(rows, points.iter().map(CurvePoint::row).collect::<Vec<_>>());

        let json_path = dir.path().join("c.json");
        export_curves(&points, &json_path, CurveFormat::from_path(&json_path)).unwrap();
        assert_eq!(read_curves_json(&json_path).unwrap(), points);

        assert!(export_curves(&[], &csv_path, CurveFormat::Csv).is_err());
        let unwritable = Path::new("/nonexistent/dir/c.csv");
        assert!(matches!(
            export_curves(&points, unwritable, CurveFormat::Csv),
            Err(Error::Io(_))
        ));
    }
}
