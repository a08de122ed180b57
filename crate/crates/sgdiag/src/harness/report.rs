//! Run provenance and output files. Every command records a manifest with
//! its resolved configuration and the files it wrote; writes go through a
//! temp-file-and-rename so readers never observe a half-written output.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;

use crate::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    /// The subcommand that produced this run.
    pub command: String,
    /// Fully resolved configuration after flags, config file, and defaults.
    pub config: serde_json::Value,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    /// File names written into the output directory, in write order.
    pub outputs: Vec<String>,
    pub version: String,
}

fn now_rfc3339() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            config,
            seed,
            started_at: now_rfc3339(),
            finished_at: String::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn record_output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    /// Stamp the finish time and write `run_manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_at = now_rfc3339();
        let mut bytes = serde_json::to_vec_pretty(&self).expect("manifest serializes");
        bytes.push(b'\n');
        let path = dir.join("run_manifest.json");
        atomic_write(&path, &bytes)?;
        Ok(path)
    }
}

/// Write a CSV file atomically: a header row, then one row per record.
/// Floats should be formatted with Rust's default `Display`, which
/// round-trips exactly.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Write to a sibling temp file, then rename over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{}.tmp{}", name, std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
