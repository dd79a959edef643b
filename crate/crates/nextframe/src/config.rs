//! JSON run configuration and reproducibility manifests.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};

pub const FORMAT_VERSION: u32 = 1;

/// A subcommand's parameters plus the global seed. Unknown keys are
/// rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig<P> {
    #[serde(default = "format_version")]
    pub format_version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub params: P,
}

fn format_version() -> u32 {
    FORMAT_VERSION
}

impl<P: Default> Default for RunConfig<P> {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed: None,
            params: P::default(),
        }
    }
}

pub fn load_config<P: DeserializeOwned + Default>(path: Option<&Path>) -> Result<RunConfig<P>> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let cfg: RunConfig<P> = serde_json::from_str(&text).map_err(|e| crate::error::FormatError::BadFile {
        path: path.to_path_buf(),
        what: e.to_string(),
    })?;
    if cfg.format_version != FORMAT_VERSION {
        return Err(crate::error::FormatError::BadFile {
            path: path.to_path_buf(),
            what: format!("format_version {} (expected {FORMAT_VERSION})", cfg.format_version),
        });
    }
    Ok(cfg)
}

/// Everything needed to rerun a command: the resolved configuration, the
/// seed and the tool version. No timestamps, so reruns produce identical
/// manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            threads: rayon::current_num_threads(),
            config: serde_json::to_value(config)?,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }
}
