//! Per-invocation run record written next to the outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Effective configuration; `--config` accepts it to repeat a run.
pub const CONFIG_FILE: &str = "effective_config.toml";

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: Config,
    /// Output path relative to the output directory → SHA-256 (hex).
    pub outputs: BTreeMap<String, String>,
    pub timings_seconds: BTreeMap<String, f64>,
    /// Command-specific summary values.
    pub results: BTreeMap<String, serde_json::Value>,
}

/// Collects outputs, timings and results while a command runs.
pub struct Recorder {
    out_dir: PathBuf,
    command: String,
    config: Config,
    outputs: Vec<PathBuf>,
    timings: BTreeMap<String, f64>,
    results: BTreeMap<String, serde_json::Value>,
    started: Instant,
}

impl Recorder {
    pub fn new(out_dir: &Path, command: &str, config: &Config) -> CliResult<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
        Ok(Recorder {
            out_dir: out_dir.to_path_buf(),
            command: command.to_string(),
            config: config.clone(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            results: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    /// Path inside the output directory, registered for checksumming.
    pub fn output(&mut self, relative: impl AsRef<Path>) -> PathBuf {
        let path = self.out_dir.join(relative.as_ref());
        if !self.outputs.contains(&path) {
            self.outputs.push(path.clone());
        }
        path
    }

    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        *self.timings.entry(phase.to_string()).or_default() += t.elapsed().as_secs_f64();
        out
    }

    pub fn result(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("result values serialize");
        self.results.insert(key.to_string(), v);
    }

    /// Writes the effective config and the manifest; called once at the end.
    pub fn finish(mut self) -> CliResult<PathBuf> {
        let cfg_path = self.output(CONFIG_FILE);
        write_file(&cfg_path, self.config.to_toml().as_bytes())?;
        let mut outputs = BTreeMap::new();
        for path in &self.outputs {
            let rel = path
                .strip_prefix(&self.out_dir)
                .unwrap_or(path)
                .to_string_lossy()
                .replace('\\', "/");
            outputs.insert(rel, sha256_file(path)?);
        }
        self.timings
            .insert("total".to_string(), self.started.elapsed().as_secs_f64());
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            argv: std::env::args().collect(),
            seed: self.config.seed,
            config: self.config,
            outputs,
            timings_seconds: self.timings,
            results: self.results,
        };
        let path = self.out_dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        write_file(&path, text.as_bytes())?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
