//! Checkpoints: a flat little-endian `f64` blob plus a JSON manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub n_params: usize,
    pub seed: u64,
    /// Free-form description: layer sizes, dims, chosen grid cell, epoch.
    pub details: serde_json::Value,
}

/// Writes `<name>.bin` and `<name>.json` under `dir`.
pub fn save(dir: &Path, name: &str, params: &[f64], manifest: &Manifest) -> Result<()> {
    if manifest.n_params != params.len() {
        return Err(Error::Validation(format!("manifest says {} params, blob has {}", manifest.n_params, params.len())));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes: Vec<u8> = params.iter().flat_map(|v| v.to_le_bytes()).collect();
    let bin = dir.join(format!("{name}.bin"));
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let json = dir.join(format!("{name}.json"));
    fs::write(&json, serde_json::to_string_pretty(manifest)? + "\n").map_err(|e| Error::io(&json, e))
}

pub fn load(dir: &Path, name: &str) -> Result<(Vec<f64>, Manifest)> {
    let json = dir.join(format!("{name}.json"));
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let bin = dir.join(format!("{name}.bin"));
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let params = read_f64s(&bytes)?;
    if params.len() != manifest.n_params {
        return Err(Error::Validation(format!("{}: expected {} params, found {}", bin.display(), manifest.n_params, params.len())));
    }
    Ok((params, manifest))
}

/// Raw row-major `f64` array (used for `x_re.bin` as well).
pub fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Validation(format!("blob of {} bytes is not a whole number of f64s", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}
