//! Layered run configuration: built-in defaults, then an optional TOML file
//! (the --config flag, or DEEPGROWTH_CONFIG when the flag is absent), then
//! command-line overrides applied by each command.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use deepgrowth::cohort::CohortSpec;
use deepgrowth::model::{LossConfig, ModelConfig, TrainConfig};
use deepgrowth::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_ENV: &str = "DEEPGROWTH_CONFIG";
pub const RESOLVED_NAME: &str = "config.resolved.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub cohort: CohortSpec,
}

impl RunConfig {
    pub fn load(explicit: Option<&Path>) -> Result<Self> {
        let path = explicit
            .map(Path::to_path_buf)
            .or_else(|| env::var_os(CONFIG_ENV).map(PathBuf::from));
        match path {
            None => Ok(RunConfig::default()),
            Some(path) => Self::from_file(&path),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        toml::from_str(&text).map_err(|e| Error::Format {
            what: "config",
            message: format!("{}: {e}", path.display()),
        })
    }

    /// Every command persists the configuration it actually ran with.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(RESOLVED_NAME);
        let text = toml::to_string_pretty(self).map_err(|e| Error::Format {
            what: "config",
            message: e.to_string(),
        })?;
        fs::write(&path, text)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }
}
