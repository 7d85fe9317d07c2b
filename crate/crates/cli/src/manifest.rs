//! Run manifests: what went in, what came out.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use cim_core::io::write_text;

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written beside every command's outputs.
///
/// `config_digest` hashes the normalized arguments together with the
/// digest of every input file. Timestamps live only here, never in the
/// result files.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub arguments: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub config_digest: String,
    pub master_seed: Option<u64>,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub struct ManifestBuilder {
    command: String,
    arguments: serde_json::Value,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    master_seed: Option<u64>,
    started: f64,
}

impl ManifestBuilder {
    pub fn new(command: &str, arguments: impl Serialize) -> Self {
        Self {
            command: command.into(),
            arguments: serde_json::to_value(arguments).unwrap_or(serde_json::Value::Null),
            inputs: Vec::new(),
            outputs: Vec::new(),
            master_seed: None,
            started: now(),
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.master_seed = Some(seed);
    }

    pub fn input(&mut self, path: &Path, contents: &[u8]) {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(contents),
        });
    }

    /// Write an output file and record its digest.
    pub fn output(&mut self, path: PathBuf, contents: &str) -> cim_core::Result<()> {
        write_text(&path, contents)?;
        self.outputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(())
    }

    pub fn finish(self, path: &Path) -> cim_core::Result<RunManifest> {
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        h.update(self.arguments.to_string().as_bytes());
        for d in &self.inputs {
            h.update(d.sha256.as_bytes());
        }
        let manifest = RunManifest {
            format_version: cim_core::FORMAT_VERSION,
            command: self.command,
            arguments: self.arguments,
            inputs: self.inputs,
            config_digest: hex::encode(h.finalize()),
            master_seed: self.master_seed,
            version: cim_core::VERSION.into(),
            started_unix: self.started,
            finished_unix: now(),
            outputs: self.outputs,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_text(path, &(text + "\n"))?;
        Ok(manifest)
    }
}
