//! `key=value` run configuration with strict key checking.

use std::fs;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

/// Everything a training run needs: trainer hyperparameters, model spec
/// selection, paths, and the seed. Unknown keys are rejected by name.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub tunable_lr_mult: f64,
    pub seed: u64,
    pub spec: String,
    pub tokens: Option<usize>,
    pub images: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 20,
            batch_size: 32,
            base_lr: 2e-4,
            warmup_epochs: 1,
            tunable_lr_mult: 0.1,
            seed: 0,
            spec: "sf-b".to_string(),
            tokens: None,
            images: None,
            teacher: None,
            out: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

impl RunConfig {
    /// Parses config text: one `key=value` per line, `#` comments and blank
    /// lines ignored. Misspelled keys fail fast, naming the offender.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", idx + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "base_lr" => cfg.base_lr = parse_num(key, value)?,
                "warmup_epochs" => cfg.warmup_epochs = parse_num(key, value)?,
                "tunable_lr_mult" => cfg.tunable_lr_mult = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "spec" => cfg.spec = value.to_string(),
                "tokens" => cfg.tokens = Some(parse_num(key, value)?),
                "images" => cfg.images = Some(PathBuf::from(value)),
                "teacher" => cfg.teacher = Some(PathBuf::from(value)),
                "out" => cfg.out = Some(PathBuf::from(value)),
                _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
