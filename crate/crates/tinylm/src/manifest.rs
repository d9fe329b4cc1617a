//! Provenance record written by every command.

use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, IoContext, Result};
use crate::io::write_atomic;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub version: String,
    pub seed: Option<u64>,
    /// Resolved configuration, as `key = value` text.
    pub config: Option<String>,
    pub inputs: Vec<InputDigest>,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: Option<f64>,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn digest_file(path: &Path, h: &mut Sha256) -> Result<()> {
    let mut f = File::open(path).at(path)?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).at(path)?;
        if n == 0 {
            return Ok(());
        }
        h.update(&buf[..n]);
    }
}

/// SHA-256 of a file, or of a directory's files (relative name, then
/// contents) in sorted order.
pub fn sha256_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        files.sort();
        for f in files {
            h.update(f.strip_prefix(path).unwrap_or(&f).to_string_lossy().as_bytes());
            h.update([0]);
            digest_file(&f, &mut h)?;
        }
    } else {
        digest_file(path, &mut h)?;
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    for e in std::fs::read_dir(dir).at(dir)? {
        let p = e.at(dir)?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn start(command: Vec<String>, seed: Option<u64>, config: Option<String>, inputs: &[&Path]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputDigest {
                    path: p.display().to_string(),
                    sha256: sha256_path(p)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs,
            started_at: unix_now(),
            finished_at: None,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::format(&path, e))?;
        write_atomic(&path, text.as_bytes())
    }

    pub fn finish(&mut self) {
        self.finished_at = Some(unix_now());
    }

    /// One JSON line on stderr, for commands without an output directory.
    pub fn emit_stderr(&self) {
        if let Ok(s) = serde_json::to_string(self) {
            eprintln!("{s}");
        }
    }
}
