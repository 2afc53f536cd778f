use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tgnet_core::grid::{DayTypeScheme, GridSpec};
use tgnet_core::model::TgNetConfig;
use tgnet_core::synth::SynthConfig;
use tgnet_core::training::TrainConfig;
use tgnet_core::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Truths below `k` are left out of every metric.
    pub k: f64,
    pub quantiles: Vec<f64>,
    /// Buckets with fewer training samples use the region-wide quantile.
    pub min_bucket: usize,
    pub scheme: DayTypeScheme,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: tgnet_core::evaluation::DEFAULT_K,
            quantiles: vec![0.99, 0.95],
            min_bucket: 20,
            scheme: DayTypeScheme::TwoWay,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub logs: Option<PathBuf>,
    pub holidays: Option<PathBuf>,
    /// Directory holding `dataset.json` and the tensor files; defaults to the output directory.
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    /// Needed by `ingest` only; synthetic data carries its own spec.
    pub grid: Option<GridSpec>,
    pub synth: Option<SynthConfig>,
    pub model: TgNetConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            grid: None,
            synth: None,
            model: TgNetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        if let Some(q) = self.eval.quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return Err(Error::Config(format!("quantile {q} outside [0, 1]")));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}
