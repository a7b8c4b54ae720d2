//! One JSON line per run, appended to `<output_dir>/manifest.jsonl`.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// Resolved configuration, key to value.
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub output_dir: PathBuf,
    pub started_at: String,
    pub finished_at: String,
    pub exit_code: u8,
    pub error: Option<String>,
    /// Artifact path relative to `output_dir`, to SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn append(&self) -> std::io::Result<()> {
        fs::create_dir_all(&self.output_dir)?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.output_dir.join("manifest.jsonl"))?;
        let line = serde_json::to_string(self).expect("manifest serializes");
        writeln!(f, "{line}")
    }
}
