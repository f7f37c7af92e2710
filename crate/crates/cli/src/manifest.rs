//! Run manifest: what was run, on which inputs, producing which files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.txt";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct RunManifest {
    command: String,
    argv: Vec<String>,
    seed: Option<u64>,
    config: Option<String>,
    stats: Vec<(String, String)>,
    /// `(role, path, sha256)`.
    inputs: Vec<(String, String, String)>,
    /// `(path relative to the output directory, sha256)`.
    artifacts: Vec<(String, String)>,
    started: Instant,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed: None,
            config: None,
            stats: Vec::new(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn config(&mut self, toml: String) {
        self.config = Some(toml);
    }

    pub fn stat(&mut self, key: &str, value: impl ToString) {
        self.stats.push((key.to_string(), value.to_string()));
    }

    pub fn input_file(&mut self, role: &str, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.inputs.push((role.to_string(), path.display().to_string(), hash));
        Ok(())
    }

    pub fn input_files(&mut self, role: &str, dir: &Path, names: &[&str]) -> Result<()> {
        for name in names {
            self.input_file(&format!("{role}/{name}"), &dir.join(name))?;
        }
        Ok(())
    }

    /// Hashes `path` (which must lie under `root`) and lists it.
    pub fn artifact(&mut self, root: &Path, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.artifacts.push((rel.display().to_string(), hash));
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# gcl4sr run manifest\n");
        writeln!(s, "command = {}", self.command).unwrap();
        writeln!(s, "version = {}", env!("CARGO_PKG_VERSION")).unwrap();
        writeln!(s, "argv = {}", self.argv.join(" ")).unwrap();
        if let Some(seed) = self.seed {
            writeln!(s, "seed = {seed}").unwrap();
        }
        writeln!(s, "elapsed_secs = {:.3}", self.started.elapsed().as_secs_f64()).unwrap();
        for (k, v) in &self.stats {
            writeln!(s, "stat.{k} = {v}").unwrap();
        }
        for (role, path, hash) in &self.inputs {
            writeln!(s, "input.{role} = {path} sha256:{hash}").unwrap();
        }
        for (path, hash) in &self.artifacts {
            writeln!(s, "artifact = {path} sha256:{hash}").unwrap();
        }
        if let Some(cfg) = &self.config {
            s.push_str("\n[config]\n");
            s.push_str(cfg);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_NAME);
        fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}
