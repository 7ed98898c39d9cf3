//! Output directories, artifact writing and the hash manifest.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const OUT_ENV: &str = "TPP_OUT";

#[derive(Debug, Serialize)]
struct Artifact {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    artifacts: Vec<Artifact>,
}

/// A command's output directory; tracks what it wrote.
pub struct Output {
    dir: PathBuf,
    command: &'static str,
    written: Vec<String>,
}

impl Output {
    /// `--out` if given, else `$TPP_OUT/<command>`, else `runs/<command>`.
    pub fn create(flag: Option<&Path>, command: &'static str) -> Result<Self> {
        let dir = match flag {
            Some(p) => p.to_path_buf(),
            None => std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(command),
        };
        std::fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
        Ok(Self {
            dir,
            command,
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes atomically (temp file, then rename).
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        std::fs::write(&tmp, bytes).map_err(CliError::io(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(CliError::io(&path))?;
        self.record(name);
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Input(e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Notes a file written by other means.
    pub fn record(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
    }

    /// Hashes every recorded artifact into `manifest.json`.
    pub fn finish(self) -> Result<PathBuf> {
        let mut artifacts = Vec::new();
        for name in &self.written {
            let p = self.dir.join(name);
            let bytes = std::fs::read(&p).map_err(CliError::io(&p))?;
            artifacts.push(Artifact {
                path: name.clone(),
                sha256: hex::encode(Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
            });
        }
        let manifest = Manifest {
            command: self.command,
            artifacts,
        };
        let path = self.dir.join("manifest.json");
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Input(e.to_string()))?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes).map_err(CliError::io(&path))?;
        Ok(path)
    }
}
