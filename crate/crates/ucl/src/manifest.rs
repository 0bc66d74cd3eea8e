//! JSON manifest of a task stream: enough to rebuild every task exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use ucl_core::data::TaskStream;

use crate::error::{format_err, IoContext, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub manifest_version: u32,
    pub trial_seed: u64,
    pub num_classes: usize,
    #[serde(flatten)]
    pub stream: TaskStream,
}

impl StreamManifest {
    pub fn new(stream: TaskStream, trial_seed: u64, num_classes: usize) -> Self {
        Self { manifest_version: MANIFEST_VERSION, trial_seed, num_classes, stream }
    }
}

pub fn write_manifest(path: &Path, manifest: &StreamManifest) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(manifest)?).at(path)
}

pub fn read_manifest(path: &Path) -> Result<StreamManifest> {
    let m: StreamManifest = serde_json::from_slice(&fs::read(path).at(path)?)?;
    if m.manifest_version != MANIFEST_VERSION {
        return Err(format_err(path, format!("manifest version {} (expected {MANIFEST_VERSION})", m.manifest_version)));
    }
    Ok(m)
}
