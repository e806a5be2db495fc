//! Run manifest: the resolved configuration, content hashes of every input
//! file, the per-epoch metric history, and the final numbers — enough to
//! rerun a job and get the same bits. Written atomically at run end.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::checkpoint::write_atomic;
use crate::config::RunConfig;

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: Vec<(String, String)>,
    /// (label, path, sha256) per input file.
    pub inputs: Vec<(String, PathBuf, String)>,
    /// One line per epoch or sweep row, already formatted as key=value
    /// pairs.
    pub history: Vec<String>,
    pub finals: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            seed: config.seed,
            config: config.echo(),
            inputs: Vec::new(),
            history: Vec::new(),
            finals: Vec::new(),
        }
    }

    /// Fingerprints one input file by content hash.
    pub fn add_input(&mut self, label: &str, path: &Path) -> std::io::Result<()> {
        let hash = sha256_file(path)?;
        self.inputs.push((label.to_string(), path.to_path_buf(), hash));
        Ok(())
    }

    pub fn push_history(&mut self, line: String) {
        self.history.push(line);
    }

    pub fn push_final(&mut self, key: &str, value: String) {
        self.finals.push((key.to_string(), value));
    }

    /// Plain-text rendering: a header, then `[config]`, `[inputs]`,
    /// `[history]`, and `[final]` sections of key=value lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("command = {}\n", self.command));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str("\n[config]\n");
        for (k, v) in &self.config {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str("\n[inputs]\n");
        for (label, path, hash) in &self.inputs {
            out.push_str(&format!("{label} = {} sha256={hash}\n", path.display()));
        }
        out.push_str("\n[history]\n");
        for line in &self.history {
            out.push_str(line);
            out.push('\n');
        }
        out.push_str("\n[final]\n");
        for (k, v) in &self.finals {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        write_atomic(path, self.render().as_bytes())
    }
}
