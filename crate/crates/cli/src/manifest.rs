use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Name of the manifest written next to the reports.
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(name: &str, contents: &[u8]) -> Self {
        let hex: String = Sha256::digest(contents).iter().map(|b| format!("{b:02x}")).collect();
        Self { name: name.to_string(), bytes: contents.len(), sha256: hex }
    }
}

/// What a run did and what it wrote.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Config file path, `preset:<NAME>`, or `none`.
    pub config: String,
    pub seed: u64,
    pub out_dir: String,
    pub passed: bool,
    pub files: Vec<FileDigest>,
}

/// Report files held in memory until the run finishes.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: &str, contents: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), contents.into()));
    }

    pub fn add_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.add(name, text);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    /// Writes every file, then the manifest describing them.
    pub fn write(self, dir: &Path, mut manifest: RunManifest) -> Result<RunManifest> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        manifest.files = self.files.iter().map(|(n, c)| FileDigest::of(n, c)).collect();
        for (name, contents) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|e| CliError::io(path, e))?;
        }
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| CliError::io(path, e))?;
        Ok(manifest)
    }
}
