//! Run manifest: command, seed, and content hashes of every input and output
//! file, so identical configurations are verifiably identical runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct Manifest {
    pub cmd: String,
    pub seed: u64,
    /// Input path (as given) → sha256 of contents.
    pub inputs: BTreeMap<String, String>,
    /// Output file name relative to the out directory → sha256 of contents.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Hashes inputs and outputs and writes `manifest.json` under `out_dir`.
/// Output keys are recorded relative to `out_dir` so reruns into different
/// directories produce identical manifests.
pub fn write_manifest(
    cmd: &str,
    seed: u64,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    out_dir: &Path,
) -> anyhow::Result<PathBuf> {
    let mut manifest = Manifest {
        cmd: cmd.to_string(),
        seed,
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
    };
    for path in inputs {
        manifest
            .inputs
            .insert(path.display().to_string(), sha256_file(path)?);
    }
    for path in outputs {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
                .with_context(|| format!("listing {}", path.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            for file in entries {
                let key = file
                    .strip_prefix(out_dir)
                    .unwrap_or(&file)
                    .display()
                    .to_string();
                manifest.outputs.insert(key, sha256_file(&file)?);
            }
        } else {
            let key = path
                .strip_prefix(out_dir)
                .unwrap_or(path)
                .display()
                .to_string();
            manifest.outputs.insert(key, sha256_file(path)?);
        }
    }
    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&manifest_path, text + "\n")
        .with_context(|| format!("writing {}", manifest_path.display()))?;
    Ok(manifest_path)
}
