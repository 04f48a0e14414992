//! Per-run manifest and file hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// What a command did and which files it produced. Paths are absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Effective configuration after flag overrides, as TOML.
    pub config: String,
    pub dataset_manifest: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// Every file written by the run.
    pub artifacts: Vec<PathBuf>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        for p in self
            .artifacts
            .iter()
            .chain(self.checkpoint.iter())
            .chain(self.report.iter())
            .chain(std::iter::once(&self.dataset_manifest))
        {
            if !p.exists() {
                return Err(CliError::Data(format!("manifest references missing {}", p.display())));
            }
        }
        let text = toml::to_string(self).expect("manifest serializes");
        write_file(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = read_file(path)?;
        toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

pub fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    std::fs::canonicalize(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    absolute(dir)
}
