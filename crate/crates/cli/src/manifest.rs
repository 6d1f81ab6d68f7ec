use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{CliError, Stage, StageContext};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Record of everything a pipeline run wrote into one output directory.
///
/// Entries accumulate across stages as long as the configuration hash is
/// unchanged; a different configuration starts a fresh manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    /// Sorted by path.
    pub files: Vec<FileEntry>,
    pub timings: Vec<StageTiming>,
    pub versions: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the configuration fields that influence outputs; the output
/// directory and worker count are excluded.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    let mut canonical = cfg.clone();
    canonical.output_dir = Default::default();
    canonical.workers = 1;
    sha256_hex(&serde_json::to_vec(&canonical).expect("configuration serializes"))
}

impl RunManifest {
    pub fn new(config_sha256: String) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("pnlss-cli".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("manifest_format".into(), "1".into());
        Self {
            config_sha256,
            files: Vec::new(),
            timings: Vec::new(),
            versions,
        }
    }

    /// Existing manifest of `out` when it belongs to the same configuration.
    pub fn load_or_new(out: &Path, config_sha256: &str) -> Self {
        match pnlss::io::read_json::<RunManifest>(&out.join(MANIFEST_FILE)) {
            Ok(m) if m.config_sha256 == config_sha256 => m,
            _ => Self::new(config_sha256.to_string()),
        }
    }

    pub fn record(&mut self, out: &Path, file: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(file)
            .map_err(|e| CliError::new(Stage::Manifest, format!("cannot read {}: {e}", file.display())))?;
        let rel = relative(out, file);
        let entry = FileEntry {
            path: rel.clone(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        };
        match self.files.binary_search_by(|f| f.path.cmp(&rel)) {
            Ok(i) => self.files[i] = entry,
            Err(i) => self.files.insert(i, entry),
        }
        Ok(())
    }

    pub fn record_timing(&mut self, stage: Stage, seconds: f64) {
        let name = stage.to_string();
        self.timings.retain(|t| t.stage != name);
        self.timings.push(StageTiming { stage: name, seconds });
    }

    pub fn save(&self, out: &Path) -> Result<(), CliError> {
        pnlss::io::write_json(&out.join(MANIFEST_FILE), self).stage(Stage::Manifest)
    }

    /// Recomputes every listed digest.
    pub fn verify(&self, out: &Path) -> Result<(), CliError> {
        for f in &self.files {
            let path = out.join(&f.path);
            let bytes = std::fs::read(&path)
                .map_err(|e| CliError::new(Stage::Manifest, format!("{} is listed but unreadable: {e}", f.path)))?;
            if sha256_hex(&bytes) != f.sha256 {
                return Err(CliError::new(Stage::Manifest, format!("{} does not match its recorded digest", f.path)));
            }
        }
        Ok(())
    }
}

fn relative(out: &Path, file: &Path) -> String {
    let rel = file.strip_prefix(out).unwrap_or(file);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}
