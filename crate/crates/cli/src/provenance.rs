//! Provenance stamped on every output file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const TOOL: &str = "skt-spatial";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    /// First 16 hex digits of the SHA-256 of the canonical config JSON.
    pub config_hash: String,
    /// SHA-256 prefixes of input files, keyed by role.
    pub inputs: BTreeMap<String, String>,
    pub config: serde_json::Value,
}

/// Keys of `serde_json::Map` are sorted, so `to_string` is canonical.
pub fn config_hash(echo: &serde_json::Value) -> String {
    short_hash(serde_json::to_string(echo).expect("json value serializes").as_bytes())
}

pub fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl Provenance {
    pub fn new(command: &'static str, cfg: &ExperimentConfig) -> Self {
        let config = cfg.echo();
        Self {
            tool: TOOL,
            version: VERSION,
            command,
            seed: cfg.seed,
            config_hash: config_hash(&config),
            inputs: BTreeMap::new(),
            config,
        }
    }

    pub fn with_input(mut self, role: &str, bytes: &[u8]) -> Self {
        self.inputs.insert(role.to_string(), short_hash(bytes));
        self
    }

    /// One-line form used as a `#` comment at the top of CSV files.
    pub fn header(&self) -> String {
        let mut s = format!(
            "{} {} {} seed={} config_hash={}",
            self.tool, self.version, self.command, self.seed, self.config_hash
        );
        for (role, hash) in &self.inputs {
            s.push_str(&format!(" {role}={hash}"));
        }
        s
    }
}

/// Output directory plus helpers that map failures to I/O errors.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn create_file(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.path(name);
        File::create(&path).map(BufWriter::new).map_err(|e| CliError::io(&path, e))
    }

    /// Pretty JSON with a trailing newline.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value).expect("output serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }

    pub fn finish(&self, name: &str, mut w: BufWriter<File>) -> Result<()> {
        w.flush().map_err(|e| CliError::io(&self.path(name), e))
    }
}

/// Insert `provenance` (and any extra fields) at the top level of a JSON
/// object.
pub fn stamp<T: Serialize>(value: &T, prov: &Provenance, extra: &[(&str, serde_json::Value)]) -> serde_json::Value {
    let mut v = serde_json::to_value(value).expect("output serializes");
    if let Some(map) = v.as_object_mut() {
        map.insert("provenance".into(), serde_json::to_value(prov).expect("provenance serializes"));
        for (k, x) in extra {
            map.insert((*k).into(), x.clone());
        }
    }
    v
}
