use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: &'static str,
    pub parallel: bool,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub duration_secs: f64,
}

pub struct Run {
    command: String,
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    start: Instant,
}

fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {} for its digest", path.display()))?;
    Ok(FileDigest { path: path.display().to_string(), sha256: nobias_core::sha256_hex(&bytes) })
}

impl Run {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Run {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        })
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    /// Writes `bytes` to `path` (creating parent directories) and records it.
    pub fn write(&mut self, path: impl Into<PathBuf>, bytes: &[u8]) -> Result<()> {
        let path = path.into();
        nobias_core::render::write_file(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.output(path);
        Ok(())
    }

    /// Digests every recorded file and writes the manifest to `path`.
    pub fn finish(self, path: impl AsRef<Path>) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION"),
            parallel: nobias_core::par::is_parallel(),
            config: self.config,
            seeds: self.seeds,
            inputs: self.inputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
            outputs: self.outputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
            duration_secs: self.start.elapsed().as_secs_f64(),
        };
        let path = path.as_ref();
        nobias_core::render::write_file(path, (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(())
    }
}

/// `model.nbc` -> `model.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}
