//! Run manifests: what ran, on which inputs, producing which files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// File name of the manifest inside a run directory.
pub const RUN_MANIFEST: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Input path to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Output path, relative to the run directory, to SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    pub version: String,
    pub reference_mode: bool,
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else if p.file_name().is_some_and(|n| n != RUN_MANIFEST) {
            out.push(p);
        }
    }
    Ok(())
}

/// Every file under `dir` except run manifests, sorted.
pub fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    walk(dir, &mut out)?;
    Ok(out)
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// A file's digest, or for a directory the digest over every relative path
/// and file digest beneath it.
pub fn hash_path(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return hash_file(path);
    }
    let mut h = Sha256::new();
    for f in files_under(path)? {
        let rel = f.strip_prefix(path).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update(hash_file(&f)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// Collects inputs while a command runs, then records its outputs.
pub struct RunRecorder {
    manifest: RunManifest,
    clock: Instant,
}

impl RunRecorder {
    pub fn begin(command: &str) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        RunRecorder {
            manifest: RunManifest {
                command: command.into(),
                config: serde_json::Value::Null,
                seed: None,
                inputs: BTreeMap::new(),
                artifacts: BTreeMap::new(),
                started_unix,
                wall_clock_secs: 0.0,
                version: env!("CARGO_PKG_VERSION").into(),
                reference_mode: fmini_core::numerics::kernels::reference_mode(),
            },
            clock: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = hash_path(path)?;
        self.manifest.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn config(&mut self, config: impl Serialize, seed: Option<u64>) -> Result<()> {
        self.manifest.config = serde_json::to_value(config)?;
        self.manifest.seed = seed;
        Ok(())
    }

    /// Hashes everything under `out` and writes the manifest there.
    pub fn finish(mut self, out: &Path) -> Result<RunManifest> {
        for f in files_under(out)? {
            let rel = f.strip_prefix(out).unwrap_or(&f).to_string_lossy().into_owned();
            self.manifest.artifacts.insert(rel, hash_file(&f)?);
        }
        self.manifest.wall_clock_secs = self.clock.elapsed().as_secs_f64();
        let path = out.join(RUN_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&self.manifest)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(self.manifest)
    }
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Inputs whose current digest no longer matches the recorded one.
    pub fn stale_inputs(&self) -> Result<Vec<String>> {
        let mut stale = Vec::new();
        for (path, digest) in &self.inputs {
            if hash_path(Path::new(path))? != *digest {
                stale.push(path.clone());
            }
        }
        Ok(stale)
    }
}
