//! Experiment configuration files (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_sbm, load_dataset, DatasetBundle, SbmSpec};
use crate::error::{FedTadError, Result};
use crate::federation::FedConfig;

/// Where the input graph comes from: an on-disk dataset file or an embedded
/// synthetic-generator spec. Exactly one must be given.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sbm: Option<SbmSpec>,
}

impl DatasetSource {
    pub fn resolve(&self, base_dir: &Path) -> Result<DatasetBundle> {
        match (&self.path, &self.sbm) {
            (Some(p), None) => {
                let full = if p.is_absolute() {
                    p.clone()
                } else {
                    base_dir.join(p)
                };
                load_dataset(&full)
            }
            (None, Some(spec)) => generate_sbm(spec),
            _ => Err(FedTadError::Config(
                "dataset must give exactly one of 'path' or 'sbm'".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub federation: FedConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(FedTadError::Config("experiment name is empty".into()));
        }
        if self.federation.num_clients < 1 {
            return Err(FedTadError::Config("num_clients must be >= 1".into()));
        }
        let (a, b, c) = self.federation.split_ratios;
        if (a + b + c - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
            return Err(FedTadError::Config(
                "split_ratios must be nonnegative and sum to 1".into(),
            ));
        }
        self.federation.validate()
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| FedTadError::io(path, e))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| FedTadError::Parse {
        file: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}
