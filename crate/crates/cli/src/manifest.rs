//! Run manifests and output placement.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliResult;

/// Environment variable that redirects every output into one directory.
pub const OUT_DIR_VAR: &str = "ATTNPRED_OUT_DIR";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub rng_seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    /// Fully resolved settings; rerunning with them reproduces the outputs.
    pub settings: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&Path>, settings: &impl Serialize) -> CliResult<Self> {
        Ok(Self {
            command: command.to_string(),
            config: config.map(Path::to_path_buf),
            rng_seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            settings: serde_json::to_value(settings)?,
        })
    }

    /// Writes `<stem>.manifest.json` next to the first output.
    pub fn write(&self) -> CliResult<PathBuf> {
        let first = self.outputs.first().expect("a run has at least one output");
        let path = first.with_extension("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(attnpred::Error::from)?;
        Ok(path)
    }
}

/// Where an output named `requested` goes, honoring the directory override.
pub fn output_path(requested: &Path) -> CliResult<PathBuf> {
    let path = match std::env::var_os(OUT_DIR_VAR).filter(|v| !v.is_empty()) {
        Some(dir) => {
            let name = requested.file_name().unwrap_or(requested.as_os_str());
            PathBuf::from(dir).join(name)
        }
        None => requested.to_path_buf(),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(attnpred::Error::from)?;
    }
    Ok(path)
}
