//! Run manifests, content hashes and atomic file output.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use acae::AcaeError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::Command;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, AcaeError> {
    fs::read(path).map_err(|e| AcaeError::Io(format!("{}: {e}", path.display())))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), AcaeError> {
    let io = |e: std::io::Error| AcaeError::Io(format!("{}: {e}", path.display()));
    let name = path
        .file_name()
        .ok_or_else(|| AcaeError::Io(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub run: Command,
    pub seed: Option<u64>,
    pub inputs: Vec<FileHash>,
    /// Output files, relative to the output directory.
    pub outputs: Vec<FileHash>,
    pub duration_secs: f64,
}

/// A replayed run whose inputs or outputs differ from the recorded hashes.
#[derive(Debug)]
pub struct ReplayMismatch(pub Vec<String>);

impl fmt::Display for ReplayMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "replay mismatch: {}", self.0.join("; "))
    }
}

impl std::error::Error for ReplayMismatch {}

/// Differences between recorded and reproduced output hashes.
pub fn compare_outputs(recorded: &[FileHash], replayed: &[FileHash]) -> Vec<String> {
    let mut diffs = Vec::new();
    for r in recorded {
        match replayed.iter().find(|p| p.path == r.path) {
            None => diffs.push(format!("{} was not produced", r.path.display())),
            Some(p) if p.sha256 != r.sha256 => diffs.push(format!("{} differs", r.path.display())),
            Some(_) => {}
        }
    }
    for p in replayed {
        if !recorded.iter().any(|r| r.path == p.path) {
            diffs.push(format!("{} was not recorded", p.path.display()));
        }
    }
    diffs
}
