use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use commander_core::timing::Timing;

use crate::config::LoadedConfig;
use crate::CliError;

/// Record of one command run. Contains no clock readings, so deterministic
/// runs produce identical manifests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub args: BTreeMap<String, String>,
    pub config_path: String,
    pub config_sha256: String,
    pub config: String,
    pub seed: u64,
    pub parallelism: usize,
    pub timing: Timing,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub exit_code: i32,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub struct ManifestBuilder {
    manifest: Manifest,
    output_dir: PathBuf,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &LoadedConfig) -> Self {
        Self {
            manifest: Manifest {
                command: command.to_string(),
                args: BTreeMap::new(),
                config_path: config.path.display().to_string(),
                config_sha256: sha256_hex(config.source.as_bytes()),
                config: config.source.clone(),
                seed: config.config.seed,
                parallelism: config.config.parallelism,
                timing: config.timing(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                exit_code: 0,
            },
            output_dir: config.output_dir().to_path_buf(),
        }
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) {
        self.manifest.args.insert(key.to_string(), value.to_string());
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = file_digest(path)?;
        self.manifest.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Write `bytes` under the output directory and record its digest.
    pub fn write_output(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.output_dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.manifest.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    /// Record a file some other component already wrote.
    pub fn output(&mut self, name: &str) -> Result<(), CliError> {
        let digest = file_digest(&self.output_dir.join(name))?;
        self.manifest.outputs.insert(name.to_string(), digest);
        Ok(())
    }

    pub fn finish(mut self, exit_code: i32) -> Result<PathBuf, CliError> {
        self.manifest.exit_code = exit_code;
        let name = format!("manifest-{}.json", self.manifest.command);
        let path = self.output_dir.join(name);
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
