//! Run manifests: enough provenance (config hash, seed, input content
//! hashes) to reproduce a run exactly.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::Result;

#[derive(Debug, serde::Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// Content hash per input file, sorted by path.
    pub inputs: BTreeMap<String, String>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex(&hasher.finalize()))
}

/// Write `manifest_<command>.json` into the run's output directory.
pub fn write_manifest(cfg: &RunConfig, command: &str, inputs: &[&Path]) -> Result<()> {
    let mut input_hashes = BTreeMap::new();
    for p in inputs {
        if p.exists() {
            input_hashes.insert(p.display().to_string(), file_sha256(p)?);
        }
    }
    let manifest = Manifest {
        command: command.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.run.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: input_hashes,
    };
    let out_dir = Path::new(&cfg.run.out_dir);
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("manifest_{command}.json"));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(path, text)?;
    Ok(())
}
