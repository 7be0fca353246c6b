//! Per-run manifest: config snapshot, seeds, artifact digests and metrics.
//!
//! Everything except the `wall_clock` section is a pure function of the
//! config, the seed and the code version.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Seeds};
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactDigest {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    /// Keyed by dataset name (`train`, `id_test`, ...).
    #[serde(default)]
    pub datasets: BTreeMap<String, ArtifactDigest>,
    #[serde(default)]
    pub artifacts: BTreeMap<String, ArtifactDigest>,
    #[serde(default)]
    pub metrics: BTreeMap<String, serde_json::Value>,
    /// Seconds per completed stage; excluded from reproducibility checks.
    #[serde(default)]
    pub wall_clock: BTreeMap<String, f64>,
}

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(run_dir: &Path, path: &Path) -> Result<ArtifactDigest, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let rel = path.strip_prefix(run_dir).unwrap_or(path);
    Ok(ArtifactDigest {
        path: rel.to_string_lossy().replace('\\', "/"),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            code_version: code_version(),
            config: config.clone(),
            seeds: config.seeds(),
            datasets: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            metrics: BTreeMap::new(),
            wall_clock: BTreeMap::new(),
        }
    }

    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn load(run_dir: &Path) -> Result<Self, CliError> {
        let path = Self::path(run_dir);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// The existing manifest if its config matches, otherwise a fresh one.
    pub fn load_or_new(run_dir: &Path, config: &ExperimentConfig) -> Self {
        match Self::load(run_dir) {
            Ok(m) if m.config == *config && m.code_version == code_version() => m,
            _ => Self::new(config),
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest always serializes");
        text.push('\n');
        write_atomic(&Self::path(run_dir), text.as_bytes())
    }

    /// The manifest with wall-clock data removed, for reproducibility checks.
    pub fn deterministic_part(&self) -> RunManifest {
        RunManifest { wall_clock: BTreeMap::new(), ..self.clone() }
    }
}
