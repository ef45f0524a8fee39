//! Run manifests written next to every command output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rankcal_core::datasets::write_atomic;
use rankcal_core::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to rerun a command: its name and fully resolved
/// configuration. Replaying ignores config files and the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| Error::contract(e.to_string()))?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })
    }
}

/// `<output>.manifest.json` for a file output, `<dir>/<command>.manifest.json`
/// for a directory output.
pub fn manifest_path_for_file(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub fn manifest_path_for_dir(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}.manifest.json"))
}
