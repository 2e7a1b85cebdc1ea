//! Checkpoints: a safetensors file of parameters plus a JSON sidecar of
//! metadata next to it (`<path>.json`).

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{ModelError, Result};
use crate::params::ParamStore;

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save<M: Serialize>(path: &Path, params: &ParamStore, meta: &M) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| ModelError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    params.save(path)?;
    let json = serde_json::to_string_pretty(meta).map_err(|e| ModelError::checkpoint(path, e.to_string()))?;
    let mp = meta_path(path);
    std::fs::write(&mp, json + "\n").map_err(|source| ModelError::Io { path: mp, source })
}

pub fn read_meta<M: DeserializeOwned>(path: &Path) -> Result<M> {
    let mp = meta_path(path);
    let text = std::fs::read_to_string(&mp).map_err(|source| ModelError::Io {
        path: mp.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ModelError::checkpoint(mp, e.to_string()))
}

/// Derives an independent seed for a named sub-stream.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
