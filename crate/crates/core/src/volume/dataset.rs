//! Dataset manifests: JSON lists of volume/label pairs tagged with a split.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Odd,
    Even,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "odd" => Ok(Split::Odd),
            "even" => Ok(Split::Even),
            other => Err(Error::Config(format!("split {other:?} is not odd or even"))),
        }
    }
}

impl Split {
    pub fn other(self) -> Split {
        match self {
            Split::Odd => Split::Even,
            Split::Even => Split::Odd,
        }
    }
}

/// Paths are relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub volume: PathBuf,
    pub labels: PathBuf,
    pub split: Split,
}

impl ManifestEntry {
    pub fn resolve(&self, manifest: &Path) -> (PathBuf, PathBuf) {
        let base = manifest.parent().unwrap_or(Path::new("."));
        (base.join(&self.volume), base.join(&self.labels))
    }

    /// File stem of the volume, used to name derived artifacts.
    pub fn name(&self) -> String {
        self.volume
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
