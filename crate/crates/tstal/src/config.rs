//! One run configuration covering every pipeline stage.
//!
//! A single JSON file can set any subset of the synthetic-data, training,
//! and localization parameters; everything omitted keeps its default, and
//! unknown keys are rejected. CLI flags override the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::SynthConfig;
use crate::error::{Error, Result};
use crate::localize::LocalizeConfig;
use crate::optim::TrainConfig;

/// Default input/output locations; any CLI path flag wins over these.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Union of the per-stage configurations, loadable from one JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub localize: LocalizeConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.localize.validate()
    }
}

/// Reads and validates a [`RunConfig`] JSON file.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    cfg.validate()?;
    Ok(cfg)
}
