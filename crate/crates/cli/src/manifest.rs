//! Run manifests and atomic output files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use dimer_core::hilbert::ModeTruncation;
use dimer_core::trajectory::PRNG_ID;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, SCHEMA_VERSION};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationRecord {
    pub label: String,
    pub n_max_1: usize,
    pub n_max_2: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config: Value,
    pub overrides: Vec<String>,
    pub code_version: String,
    pub prng: String,
    pub truncations: Vec<TruncationRecord>,
    pub started_unix: u64,
    pub wall_clock_s: Option<f64>,
    pub status: RunStatus,
    pub error: Option<String>,
    /// File name relative to the output directory -> sha256 hex digest.
    pub outputs: BTreeMap<String, String>,
}

/// Owns the output directory of one run: writes files atomically, records
/// their checksums and keeps the manifest on disk current.
pub struct RunDir {
    dir: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl RunDir {
    /// Creates the directory and writes the initial manifest.
    pub fn create(cfg: &RunConfig, overrides: Vec<String>) -> Result<Self> {
        fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
        let manifest = RunManifest {
            schema_version: SCHEMA_VERSION,
            command: cfg.command.to_string(),
            config: cfg.to_value(),
            overrides,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            prng: PRNG_ID.to_string(),
            truncations: Vec::new(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            wall_clock_s: None,
            status: RunStatus::Running,
            error: None,
            outputs: BTreeMap::new(),
        };
        let rd = Self { dir: cfg.out.clone(), manifest, started: Instant::now() };
        rd.flush_manifest()?;
        Ok(rd)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn record_truncation(&mut self, label: impl Into<String>, trunc: &ModeTruncation, dt: f64) {
        self.manifest.truncations.push(TruncationRecord {
            label: label.into(),
            n_max_1: trunc.n_max_1(),
            n_max_2: trunc.n_max_2(),
            dt,
        });
    }

    /// Writes `name` (relative, may contain subdirectories) through a temporary
    /// file in the same directory and renames it into place.
    pub fn write<F>(&mut self, name: &str, fill: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
    {
        let path = self.dir.join(name);
        let bytes = write_atomic(&path, fill)?;
        self.manifest.outputs.insert(name.to_string(), sha256_hex(&bytes));
        Ok(path)
    }

    pub fn finish(mut self, outcome: &Result<()>) -> Result<RunManifest> {
        self.manifest.wall_clock_s = Some(self.started.elapsed().as_secs_f64());
        match outcome {
            Ok(()) => self.manifest.status = RunStatus::Ok,
            Err(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.error = Some(format!("{e:#}"));
            }
        }
        self.flush_manifest()?;
        Ok(self.manifest)
    }

    fn flush_manifest(&self) -> Result<()> {
        let m = &self.manifest;
        write_atomic(&self.dir.join(MANIFEST_NAME), |w| {
            serde_json::to_writer_pretty(&mut *w, m)?;
            writeln!(w)
        })?;
        Ok(())
    }
}

/// Atomic write helper; returns the bytes written.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
{
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    let mut buf = Vec::new();
    fill(&mut buf).with_context(|| format!("formatting {}", path.display()))?;
    let tmp = tempfile::NamedTempFile::new_in(parent)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        w.write_all(&buf)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(buf)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
