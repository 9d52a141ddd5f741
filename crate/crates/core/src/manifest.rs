//! Run manifests: the resolved config, seeds, timing and a hash of every emitted file.
//! A manifest is written after all other outputs of a run, so its presence marks the run
//! directory as complete.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::{sha256_hex, write_json_atomic, SCHEMA_VERSION};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    /// Seed the instance search started from.
    pub instance_start_seed: u64,
    /// Seed of the accepted instance.
    pub instance_seed: Option<u64>,
    pub run_seeds: Vec<u64>,
    /// Whether the start seed came from the environment override.
    pub env_override: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub code_version: String,
    pub config: ExperimentConfig,
    /// The same config rendered as TOML, every default filled in.
    pub config_toml: String,
    pub instance_sha256: Option<String>,
    /// Whether the instance was generated from the config rather than loaded from a file.
    pub instance_generated: bool,
    pub seeds: SeedRecord,
    pub started_at: String,
    pub finished_at: String,
    pub files: Vec<FileEntry>,
}

pub fn timestamp_now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn code_version() -> String {
    format!("persalign {}", env!("CARGO_PKG_VERSION"))
}

pub fn file_entry(dir: &Path, rel: &str) -> Result<FileEntry> {
    let bytes = fs::read(dir.join(rel))?;
    Ok(FileEntry {
        path: rel.to_string(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig, seeds: SeedRecord, started_at: String) -> Result<Self> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            code_version: code_version(),
            config: config.clone(),
            config_toml: config.to_toml_string()?,
            instance_sha256: None,
            instance_generated: true,
            seeds,
            started_at,
            finished_at: String::new(),
            files: Vec::new(),
        })
    }

    /// Hashes `files` (relative to `dir`), stamps the end time and writes the manifest.
    pub fn finish(mut self, dir: &Path, files: &[String]) -> Result<PathBuf> {
        self.files = files
            .iter()
            .map(|rel| file_entry(dir, rel))
            .collect::<Result<_>>()?;
        self.finished_at = timestamp_now();
        let path = dir.join(MANIFEST_FILE);
        write_json_atomic(&path, &self)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let m: Self = serde_json::from_slice(&fs::read(&path)?)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "manifest schema_version {} is not supported",
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn entry(&self, rel: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == rel)
    }

    /// Files whose hash differs between this manifest and `other`, restricted to names
    /// ending in one of `suffixes`. Files missing from `other` count as differing.
    pub fn mismatches(&self, other: &RunManifest, suffixes: &[&str]) -> Vec<String> {
        self.files
            .iter()
            .filter(|f| suffixes.iter().any(|s| f.path.ends_with(s)))
            .filter(|f| other.entry(&f.path).map(|o| o.sha256 != f.sha256).unwrap_or(true))
            .map(|f| f.path.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeds() -> SeedRecord {
        SeedRecord {
            instance_start_seed: 5,
            instance_seed: Some(7),
            run_seeds: vec![0, 1],
            env_override: false,
        }
    }

    #[test]
    fn manifest_lists_hashes_and_round_trips() {
        let dir = std::env::temp_dir().join(format!("persalign-manifest-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("a.csv"), b"x,y\n1,2\n").unwrap();
        let m = RunManifest::new("online", &ExperimentConfig::default(), seeds(), timestamp_now()).unwrap();
        let path = m.finish(&dir, &["a.csv".to_string()]).unwrap();
        let back = RunManifest::load(&dir).unwrap();
        assert_eq!(back.files.len(), 1);
        assert_eq!(back.files[0].sha256, sha256_hex(b"x,y\n1,2\n"));
        assert_eq!(back.files[0].bytes, 8);
        assert_eq!(RunManifest::load(&path).unwrap(), back);
        assert_eq!(ExperimentConfig::from_toml_str(&back.config_toml).unwrap(), back.config);
        assert!(back.mismatches(&back, &[".csv"]).is_empty());
        let mut other = back.clone();
        other.files[0].sha256 = "0".repeat(64);
        assert_eq!(back.mismatches(&other, &[".csv"]), vec!["a.csv".to_string()]);
        fs::remove_dir_all(&dir).unwrap();
    }
}
