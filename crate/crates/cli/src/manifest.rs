use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use pals::{ModelProfile, ProfileRegistry};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

/// Reproducibility record written once into every output directory.
///
/// Holds nothing host- or time-dependent, so reruns with the same inputs
/// produce the same bytes.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Profile id to the hash of its resolved parameters.
    pub profile_versions: BTreeMap<String, String>,
    pub outputs: Vec<OutputFile>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

pub fn profile_version(profile: &ModelProfile) -> Result<String> {
    hash_json(profile)
}

pub fn profile_versions<'a>(
    registry: &ProfileRegistry,
    ids: impl IntoIterator<Item = &'a str>,
) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for id in ids {
        out.insert(id.to_string(), profile_version(registry.get(id)?)?);
    }
    Ok(out)
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: hash_json(config)?,
            seeds: BTreeMap::new(),
            profile_versions: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    /// Hashes `files` (relative to `dir`) and writes the manifest next to
    /// them.
    pub fn write(mut self, dir: &Path, files: &[String]) -> Result<()> {
        let mut files = files.to_vec();
        files.sort();
        for f in files {
            let bytes = std::fs::read(dir.join(&f)).with_context(|| format!("hashing {f}"))?;
            self.outputs.push(OutputFile {
                sha256: sha256_hex(&bytes),
                path: f,
            });
        }
        let mut json = serde_json::to_vec_pretty(&self)?;
        json.push(b'\n');
        std::fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }
}
