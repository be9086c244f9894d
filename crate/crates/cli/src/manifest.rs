//! Run manifests: every report embeds the resolved configuration, input file
//! digests, tool version and seeds, so identical manifests imply identical
//! reports. Wall-clock timestamps are logged to stderr instead of the report
//! file, keeping reruns byte-identical.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::SystemTime;

use serde::Serialize;
use sha2::{Digest, Sha256};

use rankbench_core::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    /// Fully resolved configuration (config file merged with flags).
    pub config: serde_json::Value,
    /// SHA-256 of every input file, keyed by path.
    pub input_digests: BTreeMap<String, String>,
    pub seed: Option<u64>,
    #[serde(skip)]
    pub started: SystemTime,
}

impl RunManifest {
    pub fn new(
        subcommand: &str,
        config: impl Serialize,
        inputs: &[&Path],
        seed: Option<u64>,
    ) -> Result<Self> {
        let mut input_digests = BTreeMap::new();
        for path in inputs {
            input_digests.insert(path.display().to_string(), file_digest(path)?);
        }
        Ok(RunManifest {
            subcommand: subcommand.to_owned(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            config: serde_json::to_value(config)
                .map_err(|e| Error::usage(format!("config not serializable: {e}")))?,
            input_digests,
            seed,
            started: SystemTime::now(),
        })
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Serialize)]
pub struct Report<T: Serialize> {
    pub manifest: RunManifest,
    pub result: T,
}

/// Write the report JSON (pretty, trailing newline) and log timing to stderr.
pub fn write_report<T: Serialize>(
    manifest: RunManifest,
    result: T,
    out: Option<&Path>,
) -> Result<()> {
    let elapsed = manifest.started.elapsed().unwrap_or_default();
    let report = Report { manifest, result };
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::usage(format!("report not serializable: {e}")))?;
    text.push('\n');
    match out {
        Some(path) => {
            std::fs::write(path, &text).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            eprintln!(
                "{}: wrote {} ({:.2?})",
                report.manifest.subcommand,
                path.display(),
                elapsed
            );
        }
        None => {
            println!("{text}");
        }
    }
    Ok(())
}

/// Write a plot-ready CSV table.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}
