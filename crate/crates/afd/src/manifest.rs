//! Run manifests: the resolved configuration of a command and SHA-256 hashes
//! of its inputs, as sorted `key=value` lines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{read_file, write_file, AfdError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a file, or of a directory as the hash of its sorted
/// `relative path, file hash` listing.
pub fn hash_path(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return Ok(sha256_hex(&read_file(path)?));
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| AfdError::io(&dir, e))? {
            let p = entry.map_err(|e| AfdError::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut listing = String::new();
    for f in files {
        let rel = f.strip_prefix(path).unwrap_or(&f);
        listing.push_str(&format!("{}\t{}\n", rel.display(), sha256_hex(&read_file(&f)?)));
    }
    Ok(sha256_hex(listing.as_bytes()))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    pub fn input(&mut self, key: &str, path: &Path) -> Result<&mut Self> {
        let hash = hash_path(path)?;
        self.inputs.insert(format!("{key}:{}", path.display()), hash);
        Ok(self)
    }

    pub fn render(&self) -> String {
        let mut s = format!("command={}\nversion={}\n", self.command, env!("CARGO_PKG_VERSION"));
        for (k, v) in &self.config {
            s.push_str(&format!("config.{k}={v}\n"));
        }
        for (k, v) in &self.inputs {
            s.push_str(&format!("input.{k}=sha256:{v}\n"));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.render().as_bytes())
    }
}

/// `<output>.run-manifest` for file outputs, `<output>/run-manifest` for
/// directories.
pub fn default_manifest_path(output: &Path, output_is_dir: bool) -> PathBuf {
    if output_is_dir {
        output.join("run-manifest")
    } else {
        let mut s = output.as_os_str().to_owned();
        s.push(".run-manifest");
        PathBuf::from(s)
    }
}
