//! Per-run manifest: config echo, seed and SHA-256 of every artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::{io, report};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Artifacts read and written by one CLI run.
#[derive(Default)]
pub struct Artifacts {
    out: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Artifacts {
    pub fn new(out: &Path) -> Self {
        Artifacts {
            out: out.to_path_buf(),
            ..Default::default()
        }
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Writes `bytes` to `name` in the output directory and records its hash.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        io::write(&self.path(name), bytes)?;
        log::info!("wrote {}", self.path(name).display());
        self.outputs.insert(name.into(), sha256_hex(bytes));
        Ok(())
    }

    /// Reads `name` from the output directory and records its hash.
    pub fn read(&mut self, name: &str) -> Result<Vec<u8>> {
        let bytes = io::read(&self.path(name))?;
        self.inputs.insert(name.into(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn outputs(&self) -> &BTreeMap<String, String> {
        &self.outputs
    }

    /// Writes `manifest_<command>.json`.
    pub fn finish<C: Serialize>(mut self, command: &str, seed: u64, config: &C) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct Manifest<'a, C> {
            command: &'a str,
            seed: u64,
            config: &'a C,
            inputs: &'a BTreeMap<String, String>,
            outputs: &'a BTreeMap<String, String>,
        }
        let bytes = report::to_json(&Manifest {
            command,
            seed,
            config,
            inputs: &self.inputs,
            outputs: &self.outputs,
        })?;
        let name = format!("manifest_{command}.json");
        io::write(&self.path(&name), &bytes)?;
        self.outputs.insert(name.clone(), sha256_hex(&bytes));
        Ok(self.path(&name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_abc() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
