//! Flat `key = value` run configuration.
//!
//! A run is described by one text file plus command-line overrides. Both go
//! through [`RunConfig::set`], so a flag and a config line with the same key
//! behave identically; flags are applied last and therefore win.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use confexit_core::{Error, ExitConfig, ModelConfig, Result, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub exit: ExitConfig,
    pub deltas: Vec<f64>,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    /// Model keys given explicitly, used to detect checkpoint mismatches.
    pub model_overrides: BTreeMap<String, usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            exit: ExitConfig::default(),
            deltas: confexit_core::bench::default_grid(),
            train_data: None,
            test_data: None,
            out: None,
            seed: 0,
            model_overrides: BTreeMap::new(),
        }
    }
}

fn bad(key: &str, value: &str, expected: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: expected {expected}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, expected))
}

impl RunConfig {
    /// Defaults, then the file at `path` if any, then `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            for (line, key, value) in parse_lines(&text, path)? {
                cfg.set(&key, &value).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: e.to_string(),
                })?;
            }
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            let v = self.model.get(key).expect("key was just set");
            self.model_overrides.insert(key.to_string(), v);
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "learning_rate" => t.learning_rate = num(key, value, "a number")?,
            "batch_size" => t.batch_size = num(key, value, "a positive integer")?,
            "epochs" => t.epochs = num(key, value, "a non-negative integer")?,
            "t_init" => t.t_init = num(key, value, "a number")?,
            "dropout" => t.dropout = num(key, value, "a number in [0, 1)")?,
            "beta1" => t.beta1 = num(key, value, "a number")?,
            "beta2" => t.beta2 = num(key, value, "a number")?,
            "adam_eps" => t.adam_eps = num(key, value, "a number")?,
            "delta" => self.exit.delta = num(key, value, "a number in [0, 1]")?,
            "window" => self.exit.window_size = num(key, value, "a positive integer")?,
            "criterion" => self.exit.criterion = value.parse()?,
            "range_epsilon" => self.exit.range_epsilon = num(key, value, "a positive number")?,
            "stages" => self.exit.set_stages(value)?,
            "deltas" => {
                self.deltas = value
                    .split(',')
                    .map(|d| num(key, d.trim(), "comma-separated numbers"))
                    .collect::<Result<_>>()?
            }
            "seed" => self.seed = num(key, value, "a non-negative integer")?,
            "train_data" => self.train_data = Some(PathBuf::from(value)),
            "test_data" => self.test_data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.exit.validate()?;
        if self.deltas.is_empty() {
            return Err(Error::Config("deltas must list at least one value".into()));
        }
        if let Some(d) = self.deltas.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(Error::Config(format!("delta {d} outside [0, 1]")));
        }
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Fails when an explicitly configured model key disagrees with `actual`.
    pub fn check_model(&self, actual: &ModelConfig) -> Result<()> {
        for (key, &want) in &self.model_overrides {
            let have = actual.get(key).expect("known model key");
            if have != want {
                return Err(Error::Config(format!(
                    "config sets {key} = {want} but the checkpoint has {have}"
                )));
            }
        }
        Ok(())
    }
}

/// Splits a config file into `(line, key, value)` triples. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_lines(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected key = value".into(),
        })?;
        out.push((i + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` command-line override.
pub fn parse_override(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
